from __future__ import annotations

import pytest

from spot_mamba import numerics as nx
from spot_mamba.config import ModelConfig, RunConfig, TrainConfig
from spot_mamba.data import generate_synthetic
from spot_mamba.graph import generate_walks, ring_graph


@pytest.fixture
def tiny_cfg() -> ModelConfig:
    """Small enough for finite-difference checks of the whole model."""
    return ModelConfig(
        D=4, K=4, M=1, T=3, T_out=3, n_layers=1, ff_dim=8, dropout=0.0,
        d_state=4, conv_width=2, n_heads=2,
    )


@pytest.fixture
def ring4():
    return ring_graph(4)


@pytest.fixture
def ring4_walks(ring4, tiny_cfg):
    return generate_walks(ring4, tiny_cfg.K, tiny_cfg.M, seed=0)


@pytest.fixture
def small_ds():
    """Four sensors over one day of 5-minute steps."""
    return generate_synthetic(4, 288, seed=0)


@pytest.fixture
def week_ds():
    """Eight sensors over one week of 5-minute steps."""
    return generate_synthetic(8, 2016, seed=0)


@pytest.fixture
def quick_run(tiny_cfg) -> RunConfig:
    return RunConfig(
        tiny_cfg,
        TrainConfig(max_epochs=2, patience=1, batch_size=16, seed=3, max_train_windows=16),
    )


def _assert_grads_match(loss_fn, tensors, rtol=1e-4, indices=None):
    """
    Run loss_fn() on a tape and compare every tensor's gradient with central
    differences. `indices` maps a tensor position to the flat coordinates to probe.
    """
    nx.zero_grad(tensors)
    with nx.Tape() as tape:
        loss = loss_fn()
    nx.backward(tape, loss, retain_intermediate=False)
    for i, t in enumerate(tensors):
        probe = None if indices is None else indices.get(i)
        numeric = nx.finite_difference_gradient(lambda _: loss_fn(), t, indices=probe).data
        analytic = t.grad
        if probe is not None:
            analytic, numeric = analytic.reshape(-1)[probe], numeric.reshape(-1)[probe]
        err = nx.relative_error(analytic, numeric)
        assert err < rtol, f"tensor {i} {t.name or tuple(t.shape)}: relative error {err:.2e}"


@pytest.fixture
def grad_check():
    return _assert_grads_match
