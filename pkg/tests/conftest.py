import numpy as np
import pytest
import torch


def random_prob_map(rng, h, w, c, sharpness=3.0):
    logits = rng.normal(0.0, sharpness, size=(h, w, c))
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def random_labels(rng, h, w, c, abstain=0.3):
    idx = rng.integers(0, c, size=(h, w))
    y = np.zeros((h, w, c))
    keep = rng.random((h, w)) >= abstain
    y[keep, idx[keep]] = 1.0
    return y


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


# Default benchmark and its source model, shared by the slow end-to-end checks.
BENCH_SEED = 7


@pytest.fixture(scope="session")
def default_benchmark():
    from sfuda_stable.data import make_benchmark

    return make_benchmark(seed=BENCH_SEED)


@pytest.fixture(scope="session")
def source_run(default_benchmark):
    from sfuda_stable.model import build_model
    from sfuda_stable.trainer import SourceConfig, train_source

    model = build_model(seed=BENCH_SEED)
    model, snapshot, history = train_source(
        model, default_benchmark.source_train, default_benchmark.source_val, SourceConfig(seed=BENCH_SEED)
    )
    return snapshot, history
