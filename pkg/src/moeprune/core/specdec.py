# src/moeprune/core/specdec.py
"""
Speculative decoding with a pruned draft and the full target model.

Each round the draft samples up to `block_size` tokens autoregressively from q.
The target scores every proposed position in one pass; token j is accepted with
probability min(1, p/q). The first rejection is replaced by a draw from
norm(max(0, p - q)); if every proposal is accepted a bonus token is drawn from p.
The emitted sequence is distributed exactly as sampling from the target alone.

No KV cache: every step re-runs the forward pass on the whole prefix.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import ValidationError
from .esap import FitnessKind, FitnessValue
from .moe import MoEModel, check_sequence, teacher_forced_distributions

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SpecDecConfig:
    prompts: tuple[tuple[int, ...], ...]
    block_size: int = 4
    max_new_tokens: int = 64
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "prompts", tuple(tuple(int(t) for t in p) for p in self.prompts))
        if self.block_size < 1:
            raise ValidationError("block_size must be >= 1", field="block_size")
        if self.max_new_tokens < 1:
            raise ValidationError("max_new_tokens must be >= 1", field="max_new_tokens")
        if not self.prompts:
            raise ValidationError("at least one prompt is required", field="prompts")


@dataclass
class PromptAcceptance:
    prompt_index: int
    proposals: int = 0
    accepted: int = 0
    residual_resamples: int = 0
    bonus_tokens: int = 0
    generated: int = 0

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.proposals if self.proposals else 0.0


@dataclass
class AcceptanceReport:
    per_prompt: list[PromptAcceptance] = field(default_factory=list)

    @property
    def proposals(self) -> int:
        return sum(r.proposals for r in self.per_prompt)

    @property
    def accepted(self) -> int:
        return sum(r.accepted for r in self.per_prompt)

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.proposals if self.proposals else 0.0

    def to_dict(self) -> dict:
        return {
            "proposals": self.proposals,
            "accepted": self.accepted,
            "acceptance_rate": self.acceptance_rate,
            "per_prompt": [
                {
                    "prompt_index": r.prompt_index,
                    "proposals": r.proposals,
                    "accepted": r.accepted,
                    "acceptance_rate": r.acceptance_rate,
                    "residual_resamples": r.residual_resamples,
                    "bonus_tokens": r.bonus_tokens,
                    "generated": r.generated,
                }
                for r in self.per_prompt
            ],
        }


@dataclass(frozen=True)
class Verification:
    emitted: tuple[int, ...]   # accepted prefix of the draft + one correction/bonus token (if any)
    accepted: int
    resampled: bool
    bonus: bool


def residual_distribution(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """norm(max(0, p - q)); falls back to p when the residual has no mass."""
    res = np.maximum(p - q, 0.0)
    total = res.sum()
    return res / total if total > 0 else p


def verify_block(p_rows: np.ndarray, q_rows: np.ndarray, drafted: Sequence[int],
                 rng: np.random.Generator, allow_bonus: bool = True) -> Verification:
    """
    Rejection step for one round.

    p_rows has one row per drafted token plus one for the bonus position when
    `allow_bonus` is set; q_rows has one row per drafted token.
    """
    emitted: list[int] = []
    for j, y in enumerate(drafted):
        p, q = p_rows[j], q_rows[j]
        if rng.random() < min(1.0, p[y] / q[y]):
            emitted.append(int(y))
            continue
        emitted.append(int(rng.choice(p.size, p=residual_distribution(p, q))))
        return Verification(tuple(emitted), j, True, False)
    if allow_bonus:
        bonus_p = p_rows[len(drafted)]
        emitted.append(int(rng.choice(bonus_p.size, p=bonus_p)))
    return Verification(tuple(emitted), len(drafted), False, allow_bonus)


def _decode_prompt(target: MoEModel, draft: MoEModel, prompt: tuple[int, ...], config: SpecDecConfig,
                   rng: np.random.Generator, stats: PromptAcceptance) -> list[int]:
    max_len = target.spec.max_seq_len
    seq = list(prompt)
    goal = min(len(prompt) + config.max_new_tokens, max_len)
    while len(seq) < goal:
        gamma = min(config.block_size, goal - len(seq))
        drafted: list[int] = []
        q_rows = []
        for _ in range(gamma):
            q = teacher_forced_distributions(draft, seq + drafted)[-1]
            q_rows.append(q)
            drafted.append(int(rng.choice(q.size, p=q)))
        allow_bonus = len(seq) + gamma < goal
        p_all = teacher_forced_distributions(target, seq + drafted[: gamma if allow_bonus else gamma - 1])
        p_rows = p_all[len(seq) - 1:]
        result = verify_block(p_rows, np.asarray(q_rows), drafted, rng, allow_bonus)
        stats.proposals += gamma
        stats.accepted += result.accepted
        stats.residual_resamples += int(result.resampled)
        stats.bonus_tokens += int(result.bonus)
        seq.extend(result.emitted)
    stats.generated = len(seq) - len(prompt)
    return seq


def spec_decode(target: MoEModel, draft: MoEModel, config: SpecDecConfig) -> tuple[list[list[int]], AcceptanceReport]:
    if target.spec.vocab_size != draft.spec.vocab_size or target.spec.max_seq_len != draft.spec.max_seq_len:
        raise ValidationError("draft and target must share vocabulary size and max_seq_len", field="draft")
    report = AcceptanceReport()
    outputs = []
    for i, prompt in enumerate(config.prompts):
        check_sequence(target.spec, prompt)
        if len(prompt) >= target.spec.max_seq_len:
            raise ValidationError(f"prompt {i} leaves no room to generate within max_seq_len", field="prompts")
        # one stream per prompt, so prompts can be decoded independently
        rng = np.random.default_rng([config.seed, i])
        stats = PromptAcceptance(prompt_index=i)
        outputs.append(_decode_prompt(target, draft, prompt, config, rng, stats))
        report.per_prompt.append(stats)
        logger.debug("Prompt %d: proposals=%d accepted=%d", i, stats.proposals, stats.accepted)
    logger.info("Speculative decoding: prompts=%d proposals=%d acceptance=%.4f",
                len(config.prompts), report.proposals, report.acceptance_rate)
    return outputs, report


def specdec_fitness(target: MoEModel, draft: MoEModel, config: SpecDecConfig) -> FitnessValue:
    _, report = spec_decode(target, draft, config)
    return FitnessValue(report.acceptance_rate, FitnessKind.SPECDEC)
