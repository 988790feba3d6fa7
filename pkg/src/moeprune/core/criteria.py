# src/moeprune/core/criteria.py
"""
Per-expert importance scores on a calibration set, and the per-layer pruning
orders derived from them (ascending importance, lowest index first on ties).

Criteria, accumulated per (layer, expert) over every calibration token:
  frequency  number of tokens routing to the expert
  seer       soft count: sum of the full-softmax router probability
  ean        mean ||E_i(h)||_2 over tokens that selected the expert
  reap       mean g_i(h) * ||E_i(h)||_2 over tokens that selected the expert
EAN and REAP are 0 for an expert that is never selected.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from ..errors import DataError, ValidationError
from .moe import MoEModel, RouteTrace, TokenSequence, check_sequence, forward

logger = logging.getLogger(__name__)


class Criterion(str, Enum):
    FREQUENCY = "frequency"
    SEER = "seer"
    EAN = "ean"
    REAP = "reap"


@dataclass(frozen=True)
class CalibrationSet:
    sequences: tuple[tuple[int, ...], ...]
    name: str = "calibration"

    def __post_init__(self):
        object.__setattr__(self, "sequences", tuple(tuple(int(t) for t in s) for s in self.sequences))


@dataclass(frozen=True, eq=False)
class ImportanceScores:
    scores: tuple[np.ndarray, ...]
    criterion: Criterion
    token_count: int  # routed token-layer events

    def __post_init__(self):
        object.__setattr__(self, "criterion", Criterion(self.criterion))
        arrs = tuple(np.asarray(s, dtype=np.float64) for s in self.scores)
        for l, s in enumerate(arrs):
            if s.ndim != 1 or s.size == 0:
                raise ValidationError(f"scores for layer {l} must be a nonempty vector", field="scores", layer=l)
            if not np.all(np.isfinite(s)):
                raise ValidationError(f"scores for layer {l} contain non-finite values", field="scores", layer=l)
        if int(self.token_count) <= 0:
            raise ValidationError("token_count must be positive", field="token_count")
        object.__setattr__(self, "scores", arrs)
        object.__setattr__(self, "token_count", int(self.token_count))

    @property
    def tokens_per_layer(self) -> int:
        return self.token_count // len(self.scores)

    def to_dict(self) -> dict:
        return {
            "criterion": self.criterion.value,
            "token_count": self.token_count,
            "scores": [s.tolist() for s in self.scores],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ImportanceScores":
        try:
            return cls(scores=tuple(d["scores"]), criterion=d["criterion"], token_count=d["token_count"])
        except KeyError as exc:
            raise ValidationError(f"importance scores missing key {exc}", field=str(exc.args[0])) from None


@dataclass(frozen=True, eq=False)
class PruningOrder:
    pi: tuple[np.ndarray, ...]

    def __post_init__(self):
        arrs = []
        for l, p in enumerate(self.pi):
            p = np.array(p, dtype=np.int64)
            if p.ndim != 1 or not np.array_equal(np.sort(p), np.arange(p.size)):
                raise ValidationError(f"pruning order for layer {l} is not a permutation", field=f"pi[{l}]", layer=l)
            p.setflags(write=False)
            arrs.append(p)
        object.__setattr__(self, "pi", tuple(arrs))

    def to_dict(self) -> dict:
        return {"pi": [p.tolist() for p in self.pi]}

    @classmethod
    def from_dict(cls, d: dict) -> "PruningOrder":
        if "pi" not in d:
            raise ValidationError("pruning order missing key 'pi'", field="pi")
        return cls(pi=tuple(d["pi"]))


class _Accumulator:
    """Collects routing traces for every layer; all updates are plain sums."""

    def __init__(self, experts_per_layer: Sequence[int]):
        self.freq = [np.zeros(n) for n in experts_per_layer]
        self.soft = [np.zeros(n) for n in experts_per_layer]
        self.norm_sum = [np.zeros(n) for n in experts_per_layer]
        self.gated_norm_sum = [np.zeros(n) for n in experts_per_layer]
        self.tokens = 0

    def __call__(self, trace: RouteTrace) -> None:
        l = trace.layer
        sel = trace.selected.ravel()
        np.add.at(self.freq[l], sel, 1.0)
        self.soft[l] += trace.router_probs.sum(axis=0)
        np.add.at(self.norm_sum[l], sel, trace.expert_norms.ravel())
        np.add.at(self.gated_norm_sum[l], sel, (trace.gates * trace.expert_norms).ravel())
        self.tokens += trace.selected.shape[0]

    def scores(self, criterion: Criterion) -> list[np.ndarray]:
        if criterion is Criterion.FREQUENCY:
            return [f.copy() for f in self.freq]
        if criterion is Criterion.SEER:
            return [s.copy() for s in self.soft]
        sums = self.norm_sum if criterion is Criterion.EAN else self.gated_norm_sum
        return [np.divide(s, f, out=np.zeros_like(s), where=f > 0) for s, f in zip(sums, self.freq)]


def calibrate(model: MoEModel, data: CalibrationSet, criterion: Criterion | str) -> ImportanceScores:
    criterion = Criterion(criterion)
    if not model.is_full:
        raise ValidationError("calibration requires the full (unpruned) model", field="model")
    if not data.sequences:
        raise DataError(f"calibration set '{data.name}' is empty")
    acc = _Accumulator(model.spec.experts_per_layer)
    for seq in data.sequences:
        forward(model, check_sequence(model.spec, seq), observer=acc)
    logger.info("Calibrated %s on '%s': sequences=%d token-layer events=%d",
                criterion.value, data.name, len(data.sequences), acc.tokens)
    return ImportanceScores(tuple(acc.scores(criterion)), criterion, acc.tokens)


def make_order(scores: ImportanceScores) -> PruningOrder:
    return PruningOrder(tuple(np.argsort(s, kind="stable") for s in scores.scores))


def calibration_set(sequences: Sequence[TokenSequence], name: str = "calibration") -> CalibrationSet:
    return CalibrationSet(tuple(tuple(int(t) for t in s) for s in sequences), name)
