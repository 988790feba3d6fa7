import os
import tempfile

# keep test runs from writing into ./logs
os.environ.setdefault("MOEPRUNE_LOG_DIR", tempfile.mkdtemp(prefix="moeprune-logs-"))

from dataclasses import replace

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from moeprune.core.criteria import Criterion, calibrate, calibration_set, make_order
from moeprune.core.esap import build_logit_cache
from moeprune.core.moe import ModelSpec, build_model
from moeprune.io.datasets import synthesize_dataset

settings.register_profile("default", max_examples=50, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("fast", max_examples=10, deadline=None)
settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "default"))


def pytest_addoption(parser):
    parser.addoption("--record-golden", action="store_true", default=False,
                     help="rewrite tests/golden/ from the current build")


def make_spec(**overrides) -> ModelSpec:
    base = dict(
        layers=2, experts_per_layer=4, fanout=2, hidden_dim=8, expert_hidden_dim=8,
        vocab_size=32, max_seq_len=16, weight_seed=7, weight_scale=0.6,
    )
    base.update(overrides)
    return ModelSpec(**base)


def with_layer(model, layer: int, **changes):
    """Copy of `model` with fields of one MoELayer replaced (hand-built weights)."""
    layers = list(model.layers)
    layers[layer] = replace(layers[layer], **changes)
    return replace(model, layers=tuple(layers))


@pytest.fixture(scope="session")
def tiny_spec():
    return make_spec()


@pytest.fixture(scope="session")
def tiny_model(tiny_spec):
    return build_model(tiny_spec)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_model):
    return synthesize_dataset(tiny_model, n_samples=8, prompt_len=4, answer_len=4, seed=3)


@pytest.fixture(scope="session")
def tiny_cache(tiny_model, tiny_dataset):
    return build_logit_cache(tiny_model, tiny_dataset)


@pytest.fixture(scope="session")
def tiny_order(tiny_model, tiny_dataset):
    data = calibration_set([s.tokens for s in tiny_dataset])
    return make_order(calibrate(tiny_model, data, Criterion.REAP))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
