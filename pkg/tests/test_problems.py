"""Desk-scale problem oracles: losses, gradients, batching."""

from __future__ import annotations

import numpy as np
import pytest

from qshampoo.problems import (
    logistic_problem,
    mlp_problem,
    quadratic_problem,
)


def fd_grad(loss, params, i, h=1e-6, batch=None):
    """Central finite difference for parameter tensor i."""
    out = np.zeros_like(params[i])
    it = np.nditer(params[i], flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        plus = [p.copy() for p in params]
        minus = [p.copy() for p in params]
        plus[i][idx] += h
        minus[i][idx] -= h
        if batch is None:
            out[idx] = (loss(plus) - loss(minus)) / (2 * h)
        else:
            out[idx] = (loss(plus, batch) - loss(minus, batch)) / (2 * h)
        it.iternext()
    return out


def test_quadratic_basics():
    prob = quadratic_problem(6, 4, cond=10.0, seed=0)
    params = prob.init()
    assert params[0].shape == (6, 4)
    assert prob.optimum == 0.0
    assert prob.loss(params) > 0.0
    assert prob.n_samples == 1


def test_quadratic_deterministic():
    a = quadratic_problem(4, 4, cond=5.0, seed=3)
    b = quadratic_problem(4, 4, cond=5.0, seed=3)
    p = a.init()
    assert a.loss(p) == b.loss(p)
    np.testing.assert_array_equal(a.grad(p)[0], b.grad(p)[0])


def test_quadratic_identity_mode_reaches_zero():
    prob = quadratic_problem(4, 4, cond=1.0, seed=0, identity=True,
                             zero_target=True)
    assert prob.loss(prob.init()) == 0.0


def test_quadratic_grad_fd():
    prob = quadratic_problem(3, 4, cond=7.0, seed=1)
    rng = np.random.default_rng(0)
    params = [rng.standard_normal((3, 4))]
    g = prob.grad(params)[0]
    np.testing.assert_allclose(g, fd_grad(prob.loss, params, 0),
                               rtol=1e-6, atol=1e-8)


def test_logistic_basics():
    prob = logistic_problem(10, 64, seed=0)
    params = prob.init()
    assert params[0].shape == (10, 2)
    full = prob.loss(params)
    assert full == pytest.approx(np.log(2.0), rel=1e-6)  # zero weights


def test_logistic_grad_fd_full_and_batch():
    prob = logistic_problem(6, 32, seed=2)
    rng = np.random.default_rng(1)
    params = [rng.standard_normal((6, 2)) * 0.5]
    np.testing.assert_allclose(prob.grad(params)[0],
                               fd_grad(prob.loss, params, 0),
                               rtol=1e-5, atol=1e-8)
    batch = np.arange(8)
    np.testing.assert_allclose(prob.grad(params, batch)[0],
                               fd_grad(prob.loss, params, 0, batch=batch),
                               rtol=1e-5, atol=1e-8)


@pytest.mark.parametrize("activation", ["relu", "tanh"])
def test_mlp_grad_fd(activation):
    prob = mlp_problem(5, 7, 3, 16, activation, seed=4)
    rng = np.random.default_rng(2)
    params = [rng.standard_normal(p.shape) * 0.5 for p in prob.init()]
    for i, g in enumerate(prob.grad(params)):
        np.testing.assert_allclose(g, fd_grad(prob.loss, params, i),
                                    rtol=1e-4, atol=1e-7)


def test_mlp_param_shapes():
    prob = mlp_problem(5, 7, 3, 16, "relu", seed=0)
    shapes = [p.shape for p in prob.init()]
    assert shapes == [(7, 5), (7,), (3, 7), (3,)]
    assert prob.param_shapes == shapes


def test_mlp_rejects_unknown_activation():
    with pytest.raises(ValueError):
        mlp_problem(4, 4, 2, 8, "gelu", seed=0)


def test_batches_cover_each_epoch():
    prob = logistic_problem(4, 12, seed=0)
    stream = prob.batches(4, seed=9)
    epoch = np.concatenate([next(stream) for _ in range(3)])
    np.testing.assert_array_equal(np.sort(epoch), np.arange(12))
    # next epoch reshuffles
    epoch2 = np.concatenate([next(stream) for _ in range(3)])
    np.testing.assert_array_equal(np.sort(epoch2), np.arange(12))
    assert not np.array_equal(epoch, epoch2)


def test_epoch_batches_list():
    prob = logistic_problem(4, 10, seed=0)
    bs = prob.epoch_batches(3, seed=1)
    assert [len(b) for b in bs] == [3, 3, 3, 1]
    np.testing.assert_array_equal(np.sort(np.concatenate(bs)), np.arange(10))
