from collections import Counter

import numpy as np
import pytest

from conftest import make_spec
from moeprune.core.allocation import (
    Allocation, BudgetSpec, Parity, count_feasible, is_feasible, random_allocation, uniform_allocation,
)
from moeprune.core.criteria import Criterion, calibrate, calibration_set, make_order
from moeprune.core.esap import FitnessKind, FitnessValue, build_logit_cache
from moeprune.core.evosearch import (
    FitnessEvaluator, Member, MutationStats, SearchConfig, brute_force_best, draw_mutation_count,
    evaluate_feasible, init_population, level_switch, run_search, switch, top_m,
)
from moeprune.core.moe import build_model
from moeprune.core.specdec import SpecDecConfig
from moeprune.errors import StructureError, ValidationError
from moeprune.io.datasets import synthesize_dataset


def instance(seed=0, experts=(4, 4, 4), fanout=(1, 1, 1), n_samples=6):
    spec = make_spec(layers=len(experts), experts_per_layer=list(experts), fanout=list(fanout),
                     weight_seed=seed, max_seq_len=12)
    model = build_model(spec)
    dataset = synthesize_dataset(model, n_samples=n_samples, prompt_len=3, answer_len=3, seed=seed + 100)
    order = make_order(calibrate(model, calibration_set([s.tokens for s in dataset]), Criterion.FREQUENCY))
    return model, order, dataset, build_logit_cache(model, dataset)


# ---------- config ----------

@pytest.mark.parametrize("kwargs, field", [
    ({"population_size": 4, "elite_size": 5}, "elite_size"),
    ({"elite_size": 0}, "elite_size"),
    ({"generations": -1}, "generations"),
    ({"parity": "even", "max_transfer": 1}, "max_transfer"),
    ({"workers": 0}, "workers"),
])
def test_search_config_validation(kwargs, field):
    with pytest.raises(ValidationError) as exc:
        SearchConfig(**kwargs)
    assert exc.value.field == field


def test_even_parity_transfers_are_even():
    assert SearchConfig(parity="even", max_transfer=5).transfer_sizes == (2, 4)
    assert SearchConfig(max_transfer=3).transfer_sizes == (1, 2, 3)


def test_search_config_round_trip():
    cfg = SearchConfig(population_size=8, parity="even", fitness="kl")
    assert SearchConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValidationError):
        SearchConfig.from_dict({**cfg.to_dict(), "bogus": 1})


# ---------- initialization ----------

def test_zero_budget_population_is_all_zero():
    pop = init_population(BudgetSpec(0, (3, 3, 3)), 3, SearchConfig(population_size=8), np.random.default_rng(0))
    assert len(pop.members) == 8
    assert all(m.allocation.r == (0, 0, 0) for m in pop.members)


def test_large_population_layout():
    L = 16
    budget = BudgetSpec(32, (6,) * L)
    pop = init_population(budget, L, SearchConfig(population_size=32), np.random.default_rng(3))
    allocs = pop.allocations
    assert len(allocs) == 32
    assert allocs[0] == uniform_allocation(budget, L)
    assert len(set(allocs[:4])) == 4
    assert len(set(allocs)) == 32
    assert all(is_feasible(a.r, budget) for a in allocs)


def test_population_is_seeded():
    budget = BudgetSpec(10, (4, 4, 4, 4))
    cfg = SearchConfig(population_size=16)
    a = init_population(budget, 4, cfg, np.random.default_rng(42)).allocations
    b = init_population(budget, 4, cfg, np.random.default_rng(42)).allocations
    assert a == b


def test_small_feasible_set_is_covered():
    budget = BudgetSpec(3, (2, 2, 2))
    pop = init_population(budget, 3, SearchConfig(population_size=7), np.random.default_rng(1))
    assert len(set(pop.allocations)) == 7 == count_feasible(budget)


def test_population_too_small_for_seeds():
    with pytest.raises(ValidationError):
        init_population(BudgetSpec(2, (2, 2)), 2, SearchConfig(population_size=3, elite_size=1),
                        np.random.default_rng(0))


# ---------- mutation ----------

def test_switch_arithmetic():
    assert switch((2, 2, 2), 0, 1, 1) == (3, 1, 2)


def test_single_layer_cannot_switch():
    with pytest.raises(StructureError):
        level_switch(Allocation((2,)), BudgetSpec(2, (3,)), SearchConfig(), np.random.default_rng(0))


def test_no_switch_possible_returns_parent():
    budget = BudgetSpec(4, (2, 2))
    stats = MutationStats()
    child = level_switch(Allocation((2, 2)), budget, SearchConfig(), np.random.default_rng(0), stats)
    assert child.r == (2, 2)
    assert stats.stagnant == 1


@pytest.mark.slow
def test_mutation_fuzz_preserves_feasibility():
    rng = np.random.default_rng(31337)
    instances = 0
    mutations = 0
    while instances < 50:
        L = int(rng.integers(2, 7))
        caps = tuple(int(c) for c in rng.integers(0, 7, size=L))
        parity = Parity.EVEN if instances % 2 else Parity.ANY
        step = 2 if parity is Parity.EVEN else 1
        top = sum(c - c % step for c in caps)
        b = int(rng.integers(0, top + 1))
        budget = BudgetSpec(b - b % step, caps, parity)
        cfg = SearchConfig(parity=parity, max_transfer=int(rng.integers(2, 6)), mutation_cap=3)
        instances += 1
        r = random_allocation(budget, L, rng)
        for _ in range(2_000):
            r = level_switch(r, budget, cfg, rng)
            assert is_feasible(r.r, budget), (r, budget)
            mutations += 1
    assert mutations == 100_000


@pytest.mark.parametrize("tau_max", [3, 5])
def test_mutation_count_distribution(tau_max):
    rng = np.random.default_rng(tau_max)
    n = 100_000
    counts = Counter(draw_mutation_count(tau_max, rng) for _ in range(n))
    for j in range(1, tau_max + 1):
        expected = (2 * (tau_max - j) + 1) / tau_max**2
        assert abs(counts[j] / n - expected) <= 0.01


# ---------- selection ----------

def test_top_m_prefers_earlier_members_on_ties():
    members = [Member(Allocation((i,)), FitnessValue(v, FitnessKind.ESAP))
               for i, v in enumerate([0.5, 0.9, 0.9, 0.1])]
    assert [m.allocation.r for m in top_m(members, 2)] == [(1,), (2,)]


# ---------- fitness evaluator ----------

def test_memo_avoids_recomputation():
    model, order, dataset, cache = instance()
    ev = FitnessEvaluator(model, order, dataset, cache, FitnessKind.ESAP, seed=0)
    a = Allocation((1, 1, 1))
    first = ev(a)
    assert ev(a) is first
    assert (ev.evaluations, ev.hits) == (1, 1)


def test_parallel_evaluation_matches_serial():
    model, order, dataset, cache = instance()
    allocs = [Allocation(r) for r in [(1, 1, 1), (3, 0, 0), (0, 3, 0), (1, 1, 1), (0, 0, 3)]]
    serial = FitnessEvaluator(model, order, dataset, cache, FitnessKind.SAP, seed=5)
    parallel = FitnessEvaluator(model, order, dataset, cache, FitnessKind.SAP, seed=5)
    ms, mp = [Member(a) for a in allocs], [Member(a) for a in allocs]
    serial.evaluate_all(ms, workers=1)
    parallel.evaluate_all(mp, workers=4)
    assert [m.fitness for m in ms] == [m.fitness for m in mp]
    assert (serial.evaluations, serial.hits) == (parallel.evaluations, parallel.hits) == (4, 1)


def test_evaluator_requires_cache_for_teacher_forced_kinds():
    model, order, dataset, _ = instance()
    with pytest.raises(ValidationError):
        FitnessEvaluator(model, order, dataset, None, FitnessKind.ESAP, seed=0)


# ---------- search ----------

def test_all_elite_single_generation_keeps_best_initial_member():
    model, order, dataset, cache = instance()
    budget = BudgetSpec(4, model.spec.caps)
    cfg = SearchConfig(population_size=4, elite_size=4, generations=1, seed=3)
    run = run_search(model, order, budget, dataset, cache, cfg)
    gen0 = init_population(budget, 3, cfg, np.random.default_rng(3))
    ev = FitnessEvaluator(model, order, dataset, cache, FitnessKind.ESAP, seed=3)
    best = max(ev(a).value for a in gen0.allocations)
    assert run.best_fitness.value == best
    assert run.history[1].evaluations == run.history[0].evaluations


def test_singleton_feasible_set():
    model, order, dataset, cache = instance()
    budget = BudgetSpec(9, model.spec.caps)
    run = run_search(model, order, budget, dataset, cache, SearchConfig(population_size=4, generations=3))
    assert run.best_allocation.r == (3, 3, 3)


def test_covered_instance_matches_brute_force():
    model, order, dataset, cache = instance(experts=(3, 3, 3), fanout=(1, 1, 1))
    budget = BudgetSpec(3, model.spec.caps)  # caps (2,2,2): 7 feasible points
    cfg = SearchConfig(population_size=7, elite_size=2, generations=10, seed=9)
    run = run_search(model, order, budget, dataset, cache, cfg)
    _, best = brute_force_best(model, order, budget, dataset, cache, limit=100)
    assert run.best_fitness.value == best.value


def test_history_is_monotone_and_budget_is_conserved():
    model, order, dataset, cache = instance(seed=4)
    budget = BudgetSpec(4, model.spec.caps, Parity.EVEN)
    seen = []
    cfg = SearchConfig(population_size=8, elite_size=2, generations=6, parity="even", seed=1)
    run = run_search(model, order, budget, dataset, cache, cfg, on_generation=seen.append)
    assert len(run.history) == 7 and seen == run.history
    best = [h.best_so_far for h in run.history]
    assert best == sorted(best)
    assert is_feasible(run.best_allocation.r, budget)
    uniform = FitnessEvaluator(model, order, dataset, cache, FitnessKind.ESAP, seed=1)(uniform_allocation(budget, 3))
    assert run.best_fitness.value >= uniform.value


def test_search_is_deterministic():
    model, order, dataset, cache = instance(seed=2)
    budget = BudgetSpec(5, model.spec.caps)
    cfg = SearchConfig(population_size=8, elite_size=2, generations=4, seed=11)
    a = run_search(model, order, budget, dataset, cache, cfg).to_dict()
    b = run_search(model, order, budget, dataset, cache, cfg).to_dict()
    assert a == b


def test_budget_must_match_model_caps():
    model, order, dataset, cache = instance()
    with pytest.raises(ValidationError):
        run_search(model, order, BudgetSpec(2, (1, 1, 1)), dataset, cache, SearchConfig(population_size=4))


# ---------- brute force ----------

def test_brute_force_zero_budget_is_self_score():
    model, order, dataset, cache = instance()
    alloc, fit = brute_force_best(model, order, BudgetSpec(0, model.spec.caps), dataset, cache, limit=10)
    assert alloc.r == (0, 0, 0)
    assert fit.value == pytest.approx(1.0, abs=1e-9)


def test_brute_force_two_layers_is_max_of_table():
    model, order, dataset, cache = instance(experts=(4, 4), fanout=(1, 1))
    budget = BudgetSpec(3, model.spec.caps)
    table = evaluate_feasible(model, order, budget, dataset, cache, limit=10)
    assert [a.r for a, _ in table] == [(0, 3), (1, 2), (2, 1), (3, 0)]
    alloc, fit = brute_force_best(model, order, budget, dataset, cache, limit=10)
    assert fit.value == max(f.value for _, f in table)
    assert alloc == next(a for a, f in table if f.value == fit.value)


def test_single_layer_search_keeps_the_only_allocation():
    model, order, dataset, cache = instance(experts=(4,), fanout=(1,))
    budget = BudgetSpec(2, model.spec.caps)
    cfg = SearchConfig(population_size=8, elite_size=2, generations=2, seed=0)
    run = run_search(model, order, budget, dataset, cache, cfg)
    assert run.best_allocation.r == (2,)
    assert len(run.history) == 3
    assert [h.stagnant_mutations for h in run.history[1:]] == [6, 6]
    assert run.evaluations == 1


def test_search_with_speculative_decoding_fitness():
    model, order, dataset, _ = instance(seed=1)
    budget = BudgetSpec(3, model.spec.caps)
    sd = SpecDecConfig(prompts=((1, 2, 3), (4, 5, 6), (7, 8)), block_size=2, max_new_tokens=5, seed=3)
    cfg = SearchConfig(population_size=4, elite_size=2, generations=2, fitness="specdec", seed=0)
    run = run_search(model, order, budget, dataset, None, cfg, specdec_config=sd)
    assert run.best_fitness.kind is FitnessKind.SPECDEC
    assert 0.0 <= run.best_fitness.value <= 1.0
    assert is_feasible(run.best_allocation.r, budget)
    again = FitnessEvaluator(model, order, dataset, None, FitnessKind.SPECDEC, seed=0, specdec_config=sd)
    assert again(run.best_allocation) == run.best_fitness


def test_specdec_fitness_needs_a_decoding_config():
    model, order, dataset, _ = instance()
    with pytest.raises(ValidationError):
        FitnessEvaluator(model, order, dataset, None, FitnessKind.SPECDEC, seed=0)
