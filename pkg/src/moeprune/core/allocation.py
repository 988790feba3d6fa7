# src/moeprune/core/allocation.py
"""
Feasible layer-wise pruning allocations.

An allocation r removes r_l experts from layer l. It is feasible for a budget
when sum(r) == B and 0 <= r_l <= cap_l = n_l - k_l. Under parity="even" every
r_l must be even as well, so all constructors work on the lattice of "units"
(1 expert, or 2 experts under even parity) with per-layer unit caps
floor(cap_l / step).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Iterator, Sequence

import numpy as np

from ..errors import FeasibilityError, SizeError, ValidationError

logger = logging.getLogger(__name__)

ENUMERATION_THRESHOLD = 10_000


class Parity(str, Enum):
    ANY = "any"
    EVEN = "even"


@dataclass(frozen=True, order=True)
class Allocation:
    r: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "r", tuple(int(v) for v in self.r))

    def __len__(self) -> int:
        return len(self.r)

    def __iter__(self) -> Iterator[int]:
        return iter(self.r)

    def __getitem__(self, i: int) -> int:
        return self.r[i]

    @property
    def total(self) -> int:
        return sum(self.r)

    def as_list(self) -> list[int]:
        return list(self.r)

    def __str__(self) -> str:
        return "(" + ",".join(str(v) for v in self.r) + ")"


@dataclass(frozen=True)
class BudgetSpec:
    budget: int
    caps: tuple[int, ...]
    parity: Parity = Parity.ANY

    def __post_init__(self):
        object.__setattr__(self, "parity", Parity(self.parity))
        object.__setattr__(self, "caps", tuple(int(c) for c in self.caps))
        object.__setattr__(self, "budget", int(self.budget))
        if not self.caps:
            raise ValidationError("caps must name at least one layer", field="caps")
        if any(c < 0 for c in self.caps):
            raise ValidationError("caps must be non-negative", field="caps")
        if self.budget < 0:
            raise FeasibilityError(f"budget {self.budget} is negative")

    def require_feasible(self) -> None:
        """Raise FeasibilityError unless at least one allocation meets this budget."""
        if self.budget % self.step:
            raise FeasibilityError(f"budget {self.budget} is odd but parity=even")
        if self.budget > sum(self.effective_caps):
            raise FeasibilityError(
                f"budget {self.budget} exceeds the largest removable total {sum(self.effective_caps)}"
            )

    @property
    def step(self) -> int:
        return 2 if self.parity is Parity.EVEN else 1

    @property
    def effective_caps(self) -> tuple[int, ...]:
        """Caps rounded down onto the parity lattice."""
        return tuple(c - c % self.step for c in self.caps)

    @property
    def num_layers(self) -> int:
        return len(self.caps)

    def to_dict(self) -> dict:
        return {"budget": self.budget, "parity": self.parity.value, "caps": list(self.caps)}

    @classmethod
    def from_dict(cls, d: dict) -> "BudgetSpec":
        for key in ("budget", "parity", "caps"):
            if key not in d:
                raise ValidationError(f"budget spec missing key '{key}'", field=key)
        return cls(budget=d["budget"], caps=tuple(d["caps"]), parity=d["parity"])


def _unit_caps(budget: BudgetSpec) -> tuple[int, ...]:
    return tuple(c // budget.step for c in budget.caps)


def _check_length(budget: BudgetSpec, L: int) -> None:
    if L != budget.num_layers:
        raise ValidationError(f"budget describes {budget.num_layers} layers, got L={L}", field="L")


def is_feasible(alloc: Sequence[int], budget: BudgetSpec) -> bool:
    r = list(alloc)
    if len(r) != budget.num_layers or sum(r) != budget.budget:
        return False
    for v, cap in zip(r, budget.caps):
        if not 0 <= v <= cap or v % budget.step:
            return False
    return True


def budget_from_sparsity(caps: Sequence[int], experts_per_layer: Sequence[int], sparsity: float,
                         parity: Parity | str = Parity.ANY) -> BudgetSpec:
    """B = round(sparsity * total experts), snapped down to the lattice and clipped to what is removable."""
    if not 0.0 <= float(sparsity) < 1.0:
        raise ValidationError(f"sparsity {sparsity} outside [0, 1)", field="sparsity")
    parity = Parity(parity)
    step = 2 if parity is Parity.EVEN else 1
    b = int(round(float(sparsity) * sum(experts_per_layer)))
    b -= b % step
    b = min(b, sum(c - c % step for c in caps))
    budget = BudgetSpec(budget=b, caps=tuple(caps), parity=parity)
    budget.require_feasible()
    return budget


# ---------- counting ----------

@lru_cache(maxsize=256)
def _suffix_counts(unit_caps: tuple[int, ...], units: int) -> tuple[tuple[int, ...], ...]:
    """counts[l][u] = number of ways layers l..L-1 take exactly u units."""
    L = len(unit_caps)
    counts = [[0] * (units + 1) for _ in range(L + 1)]
    counts[L][0] = 1
    for l in range(L - 1, -1, -1):
        nxt = counts[l + 1]
        row = counts[l]
        for u in range(units + 1):
            row[u] = sum(nxt[u - v] for v in range(min(unit_caps[l], u) + 1))
    return tuple(tuple(row) for row in counts)


def count_feasible(budget: BudgetSpec, L: int | None = None) -> int:
    if L is not None:
        _check_length(budget, L)
    if budget.budget % budget.step:
        return 0
    units = budget.budget // budget.step
    return _suffix_counts(_unit_caps(budget), units)[0][units]


# ---------- constructors ----------

def uniform_allocation(budget: BudgetSpec, L: int) -> Allocation:
    """floor(B/L) per layer (in lattice units), remainder one unit at a time to the lowest-index layers with room."""
    _check_length(budget, L)
    budget.require_feasible()
    caps = _unit_caps(budget)
    units = budget.budget // budget.step
    r = [min(units // L, c) for c in caps]
    left = units - sum(r)
    while left > 0:
        progressed = False
        for l in range(L):
            if left and r[l] < caps[l]:
                r[l] += 1
                left -= 1
                progressed = True
        if not progressed:
            raise FeasibilityError(f"budget {budget.budget} cannot be placed under caps {list(budget.caps)}")
    return Allocation(tuple(v * budget.step for v in r))


def _thirds(L: int) -> list[list[int]]:
    regions = [list(map(int, part)) for part in np.array_split(np.arange(L), 3)]
    # fewer than three layers: an empty region falls back to the middle layer
    return [reg if reg else [L // 2] for reg in regions]


def _pack(budget: BudgetSpec, L: int, region: list[int]) -> Allocation:
    caps = _unit_caps(budget)
    units = budget.budget // budget.step
    lo, hi = min(region), max(region)

    def distance(l: int) -> int:
        return 0 if lo <= l <= hi else min(abs(l - lo), abs(l - hi))

    r = [0] * L
    for l in sorted(range(L), key=lambda l: (distance(l), l)):
        take = min(caps[l], units)
        r[l] = take
        units -= take
        if units == 0:
            break
    if units:
        raise FeasibilityError(f"budget {budget.budget} cannot be placed under caps {list(budget.caps)}")
    return Allocation(tuple(v * budget.step for v in r))


def patterned_allocations(budget: BudgetSpec, L: int) -> list[Allocation]:
    """[early-heavy, middle-heavy, late-heavy]: greedy packing into a third of the stack, spilling outward."""
    _check_length(budget, L)
    budget.require_feasible()
    return [_pack(budget, L, region) for region in _thirds(L)]


def _draw_from_counts(budget: BudgetSpec, rng: np.random.Generator) -> Allocation:
    """Exact uniform draw over the feasible set using suffix counts (no enumeration)."""
    caps = _unit_caps(budget)
    units = budget.budget // budget.step
    counts = _suffix_counts(caps, units)
    r = []
    for l in range(len(caps)):
        options = list(range(min(caps[l], units) + 1))
        weights = [counts[l + 1][units - v] for v in options]
        total = sum(weights)
        # scale big integers down to float-safe weights before normalizing
        probs = np.array([w * 2**53 // total for w in weights], dtype=np.float64)
        v = int(rng.choice(options, p=probs / probs.sum()))
        r.append(v)
        units -= v
    return Allocation(tuple(v * budget.step for v in r))


def random_allocation(budget: BudgetSpec, L: int, rng: np.random.Generator,
                      threshold: int = ENUMERATION_THRESHOLD) -> Allocation:
    _check_length(budget, L)
    size = count_feasible(budget)
    if size == 0:
        raise FeasibilityError("the feasible set is empty")
    if size <= threshold:
        points = enumerate_feasible(budget, L, limit=threshold)
        return points[int(rng.integers(len(points)))]
    return _draw_from_counts(budget, rng)


def _walk(caps: tuple[int, ...], units: int, counts, l: int, prefix: list[int]) -> Iterator[tuple[int, ...]]:
    if l == len(caps):
        if units == 0:
            yield tuple(prefix)
        return
    for v in range(min(caps[l], units) + 1):
        if counts[l + 1][units - v]:
            prefix.append(v)
            yield from _walk(caps, units - v, counts, l + 1, prefix)
            prefix.pop()


def enumerate_feasible(budget: BudgetSpec, L: int, limit: int = ENUMERATION_THRESHOLD) -> list[Allocation]:
    """Every feasible allocation in lexicographic order; SizeError if there are more than `limit`."""
    _check_length(budget, L)
    size = count_feasible(budget)
    if size > limit:
        raise SizeError(f"feasible set has {size} allocations, more than the limit {limit}", count=size, exact=True)
    if size == 0:
        return []
    caps = _unit_caps(budget)
    units = budget.budget // budget.step
    counts = _suffix_counts(caps, units)
    step = budget.step
    return [Allocation(tuple(v * step for v in r)) for r in _walk(caps, units, counts, 0, [])]
