# src/moeprune/core/evosearch.py
"""
Evolutionary search over feasible layer-wise allocations.

Generation 0 holds the uniform allocation, the early/middle/late-heavy seeds
and random feasible allocations. Each generation keeps the top-m members
(ties: earlier member wins) and refills the population with level-switch
offspring of uniformly chosen elites. The best allocation over all
generations, including generation 0, is returned.
"""
from __future__ import annotations

import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import StructureError, ValidationError
from .allocation import (
    Allocation, BudgetSpec, Parity, count_feasible, enumerate_feasible,
    patterned_allocations, random_allocation, uniform_allocation, ENUMERATION_THRESHOLD,
)
from .criteria import PruningOrder
from .esap import FitnessKind, FitnessValue, LogitCache, SearchSample, check_cache, dataset_fitness
from .moe import MoEModel, apply_allocation
from .specdec import SpecDecConfig, specdec_fitness

logger = logging.getLogger(__name__)

NUM_PATTERNED = 3
DISTINCT_DRAW_ATTEMPTS = 100


@dataclass(frozen=True)
class SearchConfig:
    population_size: int = 32
    elite_size: int = 4
    generations: int = 20
    max_transfer: int = 4
    mutation_cap: int = 3
    seed: int = 42
    parity: Parity = Parity.ANY
    fitness: FitnessKind = FitnessKind.ESAP
    workers: int = 1
    resample_budget: int = 1000
    enumeration_limit: int = ENUMERATION_THRESHOLD

    def __post_init__(self):
        object.__setattr__(self, "parity", Parity(self.parity))
        object.__setattr__(self, "fitness", FitnessKind(self.fitness))
        if self.population_size < 1:
            raise ValidationError("population_size must be >= 1", field="population_size")
        if not 1 <= self.elite_size <= self.population_size:
            raise ValidationError("elite_size must satisfy 1 <= m <= population_size", field="elite_size")
        if self.generations < 0:
            raise ValidationError("generations must be >= 0", field="generations")
        if self.max_transfer < 1:
            raise ValidationError("max_transfer must be >= 1", field="max_transfer")
        if self.parity is Parity.EVEN and self.max_transfer < 2:
            raise ValidationError("parity=even needs max_transfer >= 2", field="max_transfer")
        if self.mutation_cap < 1:
            raise ValidationError("mutation_cap must be >= 1", field="mutation_cap")
        if self.workers < 1:
            raise ValidationError("workers must be >= 1", field="workers")
        if self.resample_budget < 1:
            raise ValidationError("resample_budget must be >= 1", field="resample_budget")

    @property
    def transfer_sizes(self) -> tuple[int, ...]:
        step = 2 if self.parity is Parity.EVEN else 1
        return tuple(range(step, self.max_transfer + 1, step))

    def to_dict(self) -> dict:
        return {
            "population_size": self.population_size,
            "elite_size": self.elite_size,
            "generations": self.generations,
            "max_transfer": self.max_transfer,
            "mutation_cap": self.mutation_cap,
            "seed": self.seed,
            "parity": self.parity.value,
            "fitness": self.fitness.value,
            "workers": self.workers,
            "resample_budget": self.resample_budget,
            "enumeration_limit": self.enumeration_limit,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SearchConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValidationError(f"search config has unknown key(s): {', '.join(unknown)}", field=unknown[0])
        return cls(**d)


@dataclass
class Member:
    allocation: Allocation
    fitness: Optional[FitnessValue] = None


@dataclass
class Population:
    members: list[Member]
    generation: int = 0

    @property
    def allocations(self) -> list[Allocation]:
        return [m.allocation for m in self.members]


@dataclass
class GenerationRecord:
    generation: int
    best: float
    mean: float
    best_so_far: float
    evaluations: int
    memo_hits: int
    stagnant_mutations: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class SearchRun:
    config: SearchConfig
    budget: BudgetSpec
    history: list[GenerationRecord] = field(default_factory=list)
    best_allocation: Optional[Allocation] = None
    best_fitness: Optional[FitnessValue] = None
    evaluations: int = 0
    memo_hits: int = 0

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "budget": self.budget.to_dict(),
            "history": [h.to_dict() for h in self.history],
            "best_allocation": self.best_allocation.as_list() if self.best_allocation else None,
            "best_fitness": self.best_fitness.to_dict() if self.best_fitness else None,
            "evaluations": self.evaluations,
            "memo_hits": self.memo_hits,
            "seed": self.config.seed,
        }


@dataclass
class MutationStats:
    offspring: int = 0
    skipped_switches: int = 0
    stagnant: int = 0


# ---------- initialization ----------

def init_population(budget: BudgetSpec, L: int, config: SearchConfig, rng: np.random.Generator) -> Population:
    budget.require_feasible()
    if config.population_size < 1 + NUM_PATTERNED:
        raise ValidationError(
            f"population_size must be >= {1 + NUM_PATTERNED} to hold the uniform and patterned seeds",
            field="population_size",
        )
    P = config.population_size
    members: list[Allocation] = []
    seen: set[Allocation] = set()
    size = count_feasible(budget)

    for seed_alloc in [uniform_allocation(budget, L), *patterned_allocations(budget, L)]:
        # structured seeds collapse onto each other when the budget leaves no slack
        if seed_alloc not in seen or size <= len(seen):
            members.append(seed_alloc)
            seen.add(seed_alloc)

    if size <= P:
        # small feasible set: cover it before repeating anything
        unseen = [a for a in enumerate_feasible(budget, L, limit=P) if a not in seen]
        for idx in rng.permutation(len(unseen)):
            if len(members) == P:
                break
            members.append(unseen[idx])
            seen.add(unseen[idx])

    while len(members) < P:
        cand = random_allocation(budget, L, rng, threshold=config.enumeration_limit)
        attempts = 1
        while cand in seen and len(seen) < size and attempts < DISTINCT_DRAW_ATTEMPTS:
            cand = random_allocation(budget, L, rng, threshold=config.enumeration_limit)
            attempts += 1
        members.append(cand)
        seen.add(cand)

    return Population([Member(a) for a in members[:P]], generation=0)


# ---------- mutation ----------

def draw_mutation_count(tau_max: int, rng: np.random.Generator) -> int:
    """tau = min of two independent uniform draws on {1..tau_max}."""
    return int(min(rng.integers(1, tau_max + 1), rng.integers(1, tau_max + 1)))


def switch(r: Sequence[int], a: int, b: int, delta: int) -> tuple[int, ...]:
    """Move `delta` pruning units from layer b to layer a."""
    out = list(r)
    out[a] += delta
    out[b] -= delta
    return tuple(out)


def _has_switch(r: Sequence[int], caps: Sequence[int], dmin: int) -> bool:
    receivers = [l for l, (v, c) in enumerate(zip(r, caps)) if v + dmin <= c]
    donors = [l for l, v in enumerate(r) if v >= dmin]
    return any(a != b for a in receivers for b in donors)


def level_switch(parent: Allocation, budget: BudgetSpec, config: SearchConfig, rng: np.random.Generator,
                 stats: Optional[MutationStats] = None) -> Allocation:
    L = len(parent)
    if L < 2:
        raise StructureError("level-switch mutation needs at least two layers")
    stats = stats if stats is not None else MutationStats()
    stats.offspring += 1
    caps = budget.effective_caps
    deltas = config.transfer_sizes
    r = tuple(parent)
    if not _has_switch(r, caps, deltas[0]):
        stats.stagnant += 1
        logger.debug("No feasible level switch from %s", parent)
        return parent

    tau = draw_mutation_count(config.mutation_cap, rng)
    applied = 0
    for _ in range(tau):
        for _attempt in range(config.resample_budget):
            a, b = (int(v) for v in rng.choice(L, size=2, replace=False))
            delta = int(deltas[rng.integers(len(deltas))])
            if r[a] + delta <= caps[a] and r[b] - delta >= 0:
                r = switch(r, a, b, delta)
                applied += 1
                break
        else:
            stats.skipped_switches += 1
    if applied == 0:
        stats.stagnant += 1
    return Allocation(r)


# ---------- fitness ----------

class FitnessEvaluator:
    """Allocation-keyed memo in front of the fitness function; safe for concurrent use."""

    def __init__(self, model: MoEModel, order: PruningOrder, dataset: Sequence[SearchSample],
                 cache: Optional[LogitCache], kind: FitnessKind, seed: int,
                 specdec_config: Optional[SpecDecConfig] = None):
        if kind is FitnessKind.SPECDEC and specdec_config is None:
            raise ValidationError("specdec fitness needs a speculative decoding config", field="fitness")
        if kind is not FitnessKind.SPECDEC and cache is None:
            raise ValidationError(f"{kind.value} fitness needs a logit cache", field="cache")
        self.model = model
        self.order = order
        self.dataset = list(dataset)
        self.cache = cache
        self.kind = kind
        self.seed = seed
        self.specdec_config = specdec_config
        self.memo: dict[Allocation, FitnessValue] = {}
        self.evaluations = 0
        self.hits = 0
        self._lock = threading.Lock()

    def _compute(self, alloc: Allocation) -> FitnessValue:
        candidate = apply_allocation(self.model, self.order, alloc.r)
        if self.kind is FitnessKind.SPECDEC:
            return specdec_fitness(self.model, candidate, self.specdec_config)
        # per-allocation stream: SAP values do not depend on evaluation order
        rng = np.random.default_rng([self.seed, *alloc.r])
        return dataset_fitness(self.cache, candidate, self.dataset, self.kind, rng)

    def __call__(self, alloc: Allocation) -> FitnessValue:
        with self._lock:
            hit = self.memo.get(alloc)
            if hit is not None:
                self.hits += 1
                return hit
        value = self._compute(alloc)
        with self._lock:
            if alloc not in self.memo:
                self.evaluations += 1
            self.memo[alloc] = value
        return value

    def evaluate_all(self, members: list[Member], workers: int = 1) -> None:
        todo = [m for m in members if m.fitness is None]
        # duplicates within a batch count as memo hits, independent of thread scheduling
        unique = list(dict.fromkeys(m.allocation for m in todo))
        if workers > 1 and len(unique) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                values = dict(zip(unique, pool.map(self, unique)))
        else:
            values = {a: self(a) for a in unique}
        with self._lock:
            self.hits += len(todo) - len(unique)
        for m in todo:
            m.fitness = values[m.allocation]


def top_m(members: list[Member], m: int) -> list[Member]:
    """The m highest-fitness members; sorted() is stable so earlier members win ties."""
    return sorted(members, key=lambda mem: -mem.fitness.value)[:m]


def _best(members: list[Member]) -> Member:
    best = members[0]
    for mem in members[1:]:
        if mem.fitness.value > best.fitness.value:
            best = mem
    return best


def _check_inputs(model: MoEModel, budget: BudgetSpec, config: SearchConfig) -> None:
    if budget.caps != model.spec.caps:
        raise ValidationError("budget caps do not match the model's n - k per layer", field="caps")
    if budget.parity is not config.parity:
        raise ValidationError("budget parity and search parity differ", field="parity")


def run_search(model: MoEModel, order: PruningOrder, budget: BudgetSpec, dataset: Sequence[SearchSample],
               cache: Optional[LogitCache], config: SearchConfig,
               specdec_config: Optional[SpecDecConfig] = None,
               on_generation: Optional[Callable[[GenerationRecord], None]] = None) -> SearchRun:
    _check_inputs(model, budget, config)
    if cache is not None:
        check_cache(cache, model.spec, dataset)
    L = model.spec.layers
    rng = np.random.default_rng(config.seed)
    evaluator = FitnessEvaluator(model, order, dataset, cache, config.fitness, config.seed, specdec_config)
    run = SearchRun(config=config, budget=budget)

    population = init_population(budget, L, config, rng)
    evaluator.evaluate_all(population.members, config.workers)
    best = _best(population.members)
    run.best_allocation, run.best_fitness = best.allocation, best.fitness

    def record(t: int, members: list[Member], stats: MutationStats) -> None:
        values = np.array([mem.fitness.value for mem in members])
        rec = GenerationRecord(
            generation=t,
            best=float(values.max()),
            mean=float(values.mean()),
            best_so_far=run.best_fitness.value,
            evaluations=evaluator.evaluations,
            memo_hits=evaluator.hits,
            stagnant_mutations=stats.stagnant,
        )
        run.history.append(rec)
        logger.info("Generation %d: best=%.6f mean=%.6f best_so_far=%.6f evaluations=%d",
                    t, rec.best, rec.mean, rec.best_so_far, rec.evaluations)
        if on_generation is not None:
            on_generation(rec)

    record(0, population.members, MutationStats())

    for t in range(1, config.generations + 1):
        elites = top_m(population.members, config.elite_size)
        stats = MutationStats()
        members = [Member(e.allocation, e.fitness) for e in elites]
        while len(members) < config.population_size:
            parent = elites[int(rng.integers(len(elites)))]
            if L < 2:
                # a single layer has exactly one feasible allocation
                stats.offspring += 1
                stats.stagnant += 1
                child = parent.allocation
            else:
                child = level_switch(parent.allocation, budget, config, rng, stats)
            members.append(Member(child))
        evaluator.evaluate_all(members, config.workers)
        population = Population(members, generation=t)
        challenger = _best(members)
        if challenger.fitness.value > run.best_fitness.value:
            run.best_allocation, run.best_fitness = challenger.allocation, challenger.fitness
        if stats.stagnant:
            logger.debug("Generation %d: %d stagnant mutations", t, stats.stagnant)
        record(t, members, stats)

    run.evaluations = evaluator.evaluations
    run.memo_hits = evaluator.hits
    return run


def evaluate_feasible(model: MoEModel, order: PruningOrder, budget: BudgetSpec, dataset: Sequence[SearchSample],
                      cache: Optional[LogitCache], limit: int, kind: FitnessKind | str = FitnessKind.ESAP,
                      seed: int = 0, specdec_config: Optional[SpecDecConfig] = None,
                      ) -> list[tuple[Allocation, FitnessValue]]:
    """Fitness of every feasible allocation, in lexicographic order."""
    if budget.caps != model.spec.caps:
        raise ValidationError("budget caps do not match the model's n - k per layer", field="caps")
    points = enumerate_feasible(budget, model.spec.layers, limit=limit)
    evaluator = FitnessEvaluator(model, order, dataset, cache, FitnessKind(kind), seed, specdec_config)
    return [(a, evaluator(a)) for a in points]


def brute_force_best(model: MoEModel, order: PruningOrder, budget: BudgetSpec, dataset: Sequence[SearchSample],
                     cache: Optional[LogitCache], limit: int, kind: FitnessKind | str = FitnessKind.ESAP,
                     seed: int = 0, specdec_config: Optional[SpecDecConfig] = None,
                     ) -> tuple[Allocation, FitnessValue]:
    table = evaluate_feasible(model, order, budget, dataset, cache, limit, kind, seed, specdec_config)
    if not table:
        budget.require_feasible()
    best_alloc, best_fit = table[0]
    for alloc, fit in table[1:]:
        if fit.value > best_fit.value:
            best_alloc, best_fit = alloc, fit
    return best_alloc, best_fit
