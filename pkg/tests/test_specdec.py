from collections import Counter
from itertools import combinations

import numpy as np
import pytest
from scipy.stats import chisquare

from conftest import make_spec
from moeprune.core.esap import FitnessKind, build_logit_cache, dataset_fitness, esap_at_context
from moeprune.core.moe import apply_allocation, build_model, teacher_forced_distributions
from moeprune.core.specdec import (
    SpecDecConfig, residual_distribution, spec_decode, specdec_fitness, verify_block,
)
from moeprune.errors import ValidationError
from moeprune.io.datasets import synthesize_dataset

P = np.array([0.05, 0.10, 0.15, 0.20, 0.20, 0.30])
Q = np.array([0.30, 0.25, 0.20, 0.10, 0.10, 0.05])


def test_residual_distribution():
    res = residual_distribution(P, Q)
    np.testing.assert_allclose(res, np.array([0, 0, 0, 0.1, 0.1, 0.25]) / 0.45, atol=1e-12)
    np.testing.assert_array_equal(residual_distribution(P, P), P)


def test_disjoint_support_rejects_and_resamples_from_target():
    p = np.array([0.5, 0.5, 0.0, 0.0])
    q = np.array([0.0, 0.0, 0.5, 0.5])
    rng = np.random.default_rng(0)
    for drafted in ([2], [3, 2]):
        out = verify_block(np.stack([p] * (len(drafted) + 1)), np.stack([q] * len(drafted)), drafted, rng)
        assert out.accepted == 0
        assert out.resampled and not out.bonus
        assert len(out.emitted) == 1 and out.emitted[0] in (0, 1)


def test_full_acceptance_emits_a_bonus_token():
    rng = np.random.default_rng(1)
    out = verify_block(np.stack([P, P, P]), np.stack([P, P]), [4, 5], rng)
    assert out.accepted == 2 and out.bonus
    assert out.emitted[:2] == (4, 5) and len(out.emitted) == 3


def test_no_bonus_at_the_length_limit():
    rng = np.random.default_rng(1)
    out = verify_block(np.stack([P, P]), np.stack([P, P]), [4, 5], rng, allow_bonus=False)
    assert out.emitted == (4, 5) and not out.bonus


@pytest.mark.slow
def test_single_token_rounds_reproduce_the_target_distribution():
    rng = np.random.default_rng(2718)
    n = 100_000
    emitted = Counter()
    accepted = 0
    for _ in range(n):
        y = int(rng.choice(Q.size, p=Q))
        out = verify_block(P[None, :], Q[None, :], [y], rng, allow_bonus=False)
        emitted[out.emitted[0]] += 1
        accepted += out.accepted
    observed = np.array([emitted[v] for v in range(P.size)])
    assert chisquare(observed, P * n).pvalue > 0.01

    rate = accepted / n
    beta = esap_at_context(P, Q)
    se = np.sqrt(beta * (1 - beta) / n)
    assert abs(rate - beta) <= 3 * se


# ---------- end-to-end decoding ----------

@pytest.fixture(scope="module")
def target():
    return build_model(make_spec(experts_per_layer=4, fanout=1, max_seq_len=24, weight_seed=13))


@pytest.fixture(scope="module")
def draft(target, tiny_order):
    return apply_allocation(target, tiny_order, (2, 1))


def test_self_draft_accepts_everything(target):
    cfg = SpecDecConfig(prompts=((1, 2, 3), (7,)), block_size=4, max_new_tokens=10, seed=5)
    _, report = spec_decode(target, target, cfg)
    assert report.acceptance_rate == 1.0
    assert all(r.residual_resamples == 0 for r in report.per_prompt)


def test_generated_length_respects_both_limits(target, draft):
    cfg = SpecDecConfig(prompts=((1, 2, 3), tuple(range(20))), block_size=4, max_new_tokens=6, seed=0)
    outputs, report = spec_decode(target, draft, cfg)
    assert [len(o) for o in outputs] == [9, 24]
    assert [r.generated for r in report.per_prompt] == [6, 4]
    assert outputs[0][:3] == [1, 2, 3]
    assert all(0 <= t < target.spec.vocab_size for o in outputs for t in o)


def test_decoding_is_seeded(target, draft):
    cfg = SpecDecConfig(prompts=((4, 4), (9, 1, 0)), block_size=3, max_new_tokens=8, seed=21)
    a, ra = spec_decode(target, draft, cfg)
    b, rb = spec_decode(target, draft, cfg)
    assert a == b
    assert ra.to_dict() == rb.to_dict()


def test_specdec_fitness_is_a_rate(target, draft):
    cfg = SpecDecConfig(prompts=((1, 2), (3, 4), (5, 6)), max_new_tokens=12)
    fit = specdec_fitness(target, draft, cfg)
    assert fit.kind is FitnessKind.SPECDEC
    assert 0.0 <= fit.value <= 1.0


def test_prompt_filling_the_context_is_rejected(target, draft):
    cfg = SpecDecConfig(prompts=(tuple(range(24)),))
    with pytest.raises(ValidationError):
        spec_decode(target, draft, cfg)


def test_draft_must_share_the_vocabulary(target):
    other = build_model(make_spec(vocab_size=16, experts_per_layer=4, fanout=1, max_seq_len=24))
    with pytest.raises(ValidationError):
        spec_decode(target, other, SpecDecConfig(prompts=((1,),)))


@pytest.mark.parametrize("kwargs, field", [
    ({"prompts": ()}, "prompts"),
    ({"prompts": ((1,),), "block_size": 0}, "block_size"),
    ({"prompts": ((1,),), "max_new_tokens": 0}, "max_new_tokens"),
])
def test_config_validation(kwargs, field):
    with pytest.raises(ValidationError) as exc:
        SpecDecConfig(**kwargs)
    assert exc.value.field == field


@pytest.mark.slow
def test_one_token_rounds_match_esap_at_a_fixed_prefix(target, draft):
    prefix = (1, 2, 3, 4)
    p = teacher_forced_distributions(target, prefix)[-1]
    q = teacher_forced_distributions(draft, prefix)[-1]
    n = 4000
    cfg = SpecDecConfig(prompts=(prefix,) * n, block_size=1, max_new_tokens=1, seed=17)
    outputs, report = spec_decode(target, draft, cfg)
    assert report.proposals == n
    assert all(len(o) == len(prefix) + 1 for o in outputs)
    beta = esap_at_context(p, q)
    se = np.sqrt(beta * (1 - beta) / n)
    assert abs(report.acceptance_rate - beta) <= 3 * se + 1e-12


def test_specdec_and_dataset_esap_rank_candidates_alike(target, tiny_order):
    dataset = synthesize_dataset(target, n_samples=32, prompt_len=4, answer_len=16, seed=31)
    cache = build_logit_cache(target, dataset)
    cfg = SpecDecConfig(prompts=tuple(s.prompt for s in dataset), block_size=4, max_new_tokens=16, seed=3)
    esap, spec = [], []
    for alloc in [(0, 0), (1, 1), (3, 3)]:
        candidate = apply_allocation(target, tiny_order, alloc)
        esap.append(dataset_fitness(cache, candidate, dataset, FitnessKind.ESAP).value)
        spec.append(specdec_fitness(target, candidate, cfg).value)
    assert esap[0] == pytest.approx(1.0) and spec[0] == 1.0
    for i, j in combinations(range(3), 2):
        if abs(esap[i] - esap[j]) > 0.05:
            assert (esap[i] > esap[j]) == (spec[i] > spec[j])
