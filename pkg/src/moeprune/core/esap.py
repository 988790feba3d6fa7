# src/moeprune/core/esap.py
"""
Teacher-forced fitness functions comparing a pruned candidate (draft, q) with
the full model (target, p) on the answer positions of a search set.

Per context:
  esap   sum_v min(p(v), q(v))  (= 1 - TV(p, q), the expected acceptance)
  sap    min(1, p(y)/q(y)) for one proposal y ~ q
  kl     -KL(p || q)
  nll    -(-log q(next token))
Per sample the context scores are averaged over answer positions, then the
per-sample means are averaged over samples. Higher is better for every kind.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from ..errors import (
    CoverageError, DataError, ShapeError, StalenessError, UndefinedProposalError, ValidationError,
)
from .moe import ModelSpec, MoEModel, check_sequence, teacher_forced_distributions

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-300
SUM_TOL = 1e-9


class FitnessKind(str, Enum):
    ESAP = "esap"
    SAP = "sap"
    KL = "kl"
    NLL = "nll"
    SPECDEC = "specdec"

    @property
    def bounded(self) -> bool:
        return self in (FitnessKind.ESAP, FitnessKind.SAP, FitnessKind.SPECDEC)


@dataclass(frozen=True)
class FitnessValue:
    value: float
    kind: FitnessKind

    def __post_init__(self):
        kind = FitnessKind(self.kind)
        v = float(self.value)
        if not math.isfinite(v):
            raise ValidationError(f"{kind.value} fitness is not finite: {v}", field="value")
        if kind.bounded:
            if not -SUM_TOL <= v <= 1 + SUM_TOL:
                raise ValidationError(f"{kind.value} fitness {v} outside [0, 1]", field="value")
            v = min(max(v, 0.0), 1.0)
        elif v > SUM_TOL:
            raise ValidationError(f"{kind.value} fitness is stored negated and must be <= 0, got {v}", field="value")
        else:
            v = min(v, 0.0)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "value", v)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "value": self.value}


def _token_ids(name: str, values) -> tuple[int, ...]:
    ids = tuple(values)
    if not all(isinstance(t, (int, np.integer)) and not isinstance(t, bool) for t in ids):
        raise DataError(f"{name} token ids must be integers", field=name)
    return tuple(int(t) for t in ids)


@dataclass(frozen=True)
class SearchSample:
    prompt: tuple[int, ...]
    answer: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "prompt", _token_ids("prompt", self.prompt))
        object.__setattr__(self, "answer", _token_ids("answer", self.answer))
        if not self.answer:
            raise DataError("search sample has an empty answer")
        if not self.prompt:
            raise DataError("search sample has an empty prompt")

    @property
    def tokens(self) -> tuple[int, ...]:
        return self.prompt + self.answer

    def check(self, spec: ModelSpec) -> None:
        check_sequence(spec, self.tokens)

    def to_dict(self) -> dict:
        return {"prompt": list(self.prompt), "answer": list(self.answer)}


@dataclass(frozen=True)
class AnswerContexts:
    positions: tuple[int, ...]


def answer_contexts(sample: SearchSample) -> AnswerContexts:
    """Positions t whose next token (t+1) lies in the answer."""
    if not sample.answer:
        raise DataError("search sample has an empty answer")
    start = len(sample.prompt) - 1
    return AnswerContexts(tuple(range(start, start + len(sample.answer))))


def dataset_hash(dataset: Sequence[SearchSample]) -> str:
    canon = json.dumps([s.to_dict() for s in dataset], sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


@dataclass(frozen=True, eq=False)
class LogitCache:
    """Full-model next-token distributions at every answer position, per sample."""
    model_hash: str
    dataset_hash: str
    vocab_size: int
    rows: tuple[np.ndarray, ...]  # rows[i] has shape (len(answer_i), V)

    @property
    def sample_count(self) -> int:
        return len(self.rows)

    @property
    def position_counts(self) -> list[int]:
        return [int(r.shape[0]) for r in self.rows]


def build_logit_cache(model: MoEModel, dataset: Sequence[SearchSample]) -> LogitCache:
    if not model.is_full:
        raise ValidationError("the logit cache must come from the full model", field="model")
    rows = []
    for sample in dataset:
        probs = teacher_forced_distributions(model, sample.tokens)
        block = np.ascontiguousarray(probs[list(answer_contexts(sample).positions)])
        block.setflags(write=False)
        rows.append(block)
    logger.info("Cached full-model distributions: samples=%d positions=%d",
                len(rows), sum(r.shape[0] for r in rows))
    return LogitCache(model.spec.spec_hash(), dataset_hash(dataset), model.spec.vocab_size, tuple(rows))


# ---------- per-context scores ----------

def check_distribution(probs, name: str = "distribution") -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size < 1:
        raise ShapeError(f"{name} must be a 1-D probability vector")
    if np.any(p < 0) or not np.all(np.isfinite(p)) or abs(p.sum() - 1.0) > SUM_TOL:
        raise ValidationError(f"{name} is not a probability distribution", field=name)
    return p


def _pair(p, q) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ShapeError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    return p, q


def acceptance_prob(p: float, q: float) -> float:
    if p < 0:
        raise ValidationError(f"target probability {p} is negative", field="p")
    if q <= 0:
        raise UndefinedProposalError("proposal probability must be positive; a zero-probability token cannot be proposed")
    return min(1.0, p / q)


def esap_at_context(p, q) -> float:
    p, q = _pair(p, q)
    return float(np.minimum(p, q).sum())


def tv_distance(p, q) -> float:
    p, q = _pair(p, q)
    return float(0.5 * np.abs(p - q).sum())


def sap_samples(p, q, rng: np.random.Generator, size: int) -> np.ndarray:
    """`size` independent SAP draws at one context."""
    p, q = _pair(p, q)
    q = check_distribution(q, "q")
    y = rng.choice(q.size, size=size, p=q)
    return np.minimum(1.0, p[y] / q[y])


def sap_at_context(p, q, rng: np.random.Generator) -> float:
    return float(sap_samples(p, q, rng, 1)[0])


def _context_scores(kind: FitnessKind, p_rows: np.ndarray, q_rows: np.ndarray, targets: np.ndarray,
                    rng: Optional[np.random.Generator]) -> np.ndarray:
    if kind is FitnessKind.ESAP:
        return np.minimum(p_rows, q_rows).sum(axis=1)
    if kind is FitnessKind.SAP:
        return np.array([sap_at_context(p, q, rng) for p, q in zip(p_rows, q_rows)])
    if kind is FitnessKind.KL:
        logp = np.log(np.maximum(p_rows, PROB_FLOOR))
        logq = np.log(np.maximum(q_rows, PROB_FLOOR))
        return -(p_rows * (logp - logq)).sum(axis=1)
    if kind is FitnessKind.NLL:
        picked = q_rows[np.arange(targets.size), targets]
        return np.log(np.maximum(picked, PROB_FLOOR))
    raise ValidationError(f"{kind.value} is not a teacher-forced fitness; use specdec_fitness", field="kind")


def check_cache(cache: LogitCache, spec: ModelSpec, dataset: Sequence[SearchSample]) -> None:
    if cache.model_hash != spec.spec_hash():
        raise StalenessError("logit cache was built for a different model spec")
    if cache.dataset_hash != dataset_hash(dataset):
        raise StalenessError("logit cache was built for a different dataset")
    if cache.vocab_size != spec.vocab_size:
        raise StalenessError("logit cache vocabulary size does not match the model")
    if cache.sample_count != len(dataset):
        raise CoverageError(f"logit cache has {cache.sample_count} samples, dataset has {len(dataset)}")
    for i, (rows, sample) in enumerate(zip(cache.rows, dataset)):
        if rows.shape != (len(sample.answer), spec.vocab_size):
            raise CoverageError(f"logit cache does not cover every answer position of sample {i}")


def sample_fitness(full_cache: LogitCache, candidate: MoEModel, dataset: Sequence[SearchSample],
                   kind: FitnessKind | str, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Per-sample mean context score (the inner average)."""
    kind = FitnessKind(kind)
    check_cache(full_cache, candidate.spec, dataset)
    if kind is FitnessKind.SAP and rng is None:
        raise ValidationError("SAP fitness needs a random generator", field="rng")
    out = np.empty(len(dataset))
    for i, (sample, p_rows) in enumerate(zip(dataset, full_cache.rows)):
        ctx = list(answer_contexts(sample).positions)
        q_rows = teacher_forced_distributions(candidate, sample.tokens)[ctx]
        targets = np.asarray(sample.answer, dtype=np.int64)
        out[i] = _context_scores(kind, p_rows, q_rows, targets, rng).mean()
    return out


def dataset_fitness(full_cache: LogitCache, candidate: MoEModel, dataset: Sequence[SearchSample],
                    kind: FitnessKind | str, rng: Optional[np.random.Generator] = None) -> FitnessValue:
    kind = FitnessKind(kind)
    if not dataset:
        raise DataError("search dataset is empty")
    per_sample = sample_fitness(full_cache, candidate, dataset, kind, rng)
    return FitnessValue(float(per_sample.mean()), kind)
