"""Base-optimizer goldens, layer partitioning, and the preconditioned step."""

from __future__ import annotations

import numpy as np
import pytest

from qshampoo.optim import (
    BaseOptimizerState,
    LayerPlan,
    ShampooConfig,
    _as_2d,
    _axis_chunks,
    adamw_step,
    block_partition,
    init_plans,
    rmsprop_step,
    sgdm_step,
    shampoo_step,
)
from qshampoo.problems import quadratic_problem
from qshampoo.state import reconstruct_side


def cfg_for(**kw):
    base = dict(mode="full32", t1=1, t2=2, block=4, exemption=0, max_order=64,
                eps=1e-6)
    base.update(kw)
    return ShampooConfig(**base)


# -- base optimizer steps -----------------------------------------------------


def test_sgdm_two_steps_golden():
    buf = {}
    W = np.array([1.0])
    sgdm_step(buf, W, np.array([0.5]), lr=0.1, momentum=0.9)
    assert W[0] == pytest.approx(1.0 - 0.1 * 0.5)
    sgdm_step(buf, W, np.array([0.5]), lr=0.1, momentum=0.9)
    # m2 = 0.9*0.5 + 0.5 = 0.95
    assert W[0] == pytest.approx(0.95 - 0.1 * 0.95)


def test_sgdm_weight_decay_enters_momentum():
    buf = {}
    W = np.array([2.0])
    sgdm_step(buf, W, np.array([0.0]), lr=0.1, momentum=0.9, weight_decay=0.5)
    # m = 0 + 0 + 0.5*2 = 1.0
    assert buf["m"][0] == pytest.approx(1.0)
    assert W[0] == pytest.approx(2.0 - 0.1)


def test_adamw_first_step_golden():
    buf = {}
    W = np.array([1.0])
    g = np.array([0.2])
    adamw_step(buf, W, g, lr=0.01, beta1=0.9, beta2=0.999, c=1e-8,
               weight_decay=0.1)
    # decoupled decay first, then the bias-corrected update (mhat=g, vhat=g^2)
    expect = 1.0 * (1 - 0.01 * 0.1) - 0.01 * 0.2 / (0.2 + 1e-8)
    assert W[0] == pytest.approx(expect, rel=1e-12)
    assert buf["t"] == 1


def test_adamw_moments_recursion():
    buf = {}
    W = np.zeros(3)
    rng = np.random.default_rng(0)
    m = v = 0.0
    for _ in range(5):
        g = rng.standard_normal(3)
        adamw_step(buf, W, g, lr=0.001)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
    np.testing.assert_allclose(buf["m"], m)
    np.testing.assert_allclose(buf["v"], v)


def test_rmsprop_step_golden():
    buf = {}
    W = np.array([1.0])
    rmsprop_step(buf, W, np.array([2.0]), lr=0.1, rho=0.9, c=0.0)
    # v = 0.1*4 = 0.4
    assert W[0] == pytest.approx(1.0 - 0.1 * 2.0 / np.sqrt(0.4))


def test_base_state_dispatch_and_validation():
    with pytest.raises(ValueError):
        BaseOptimizerState("sgd", lr=0.1)
    base = BaseOptimizerState("sgdm", lr=0.1, momentum=0.0)
    W = np.ones(2)
    base.apply(0, W, np.ones(2))
    np.testing.assert_allclose(W, 0.9)
    assert 0 in base.buffers and 1 not in base.buffers


# -- partitioning -------------------------------------------------------------


def test_axis_chunks_near_equal():
    assert _axis_chunks(10, 4) == [slice(0, 4), slice(4, 7), slice(7, 10)]
    assert _axis_chunks(8, 8) == [slice(0, 8)]
    assert _axis_chunks(9, 8) == [slice(0, 5), slice(5, 9)]


def test_block_partition_covers_matrix():
    windows = block_partition((10, 6), 4)
    assert len(windows) == 3 * 2
    seen = np.zeros((10, 6), dtype=int)
    for rs, cs in windows:
        seen[rs, cs] += 1
    np.testing.assert_array_equal(seen, 1)


def test_as_2d():
    assert _as_2d((7,)) is None
    assert _as_2d((3, 4)) == (3, 4)
    assert _as_2d((3, 4, 5)) == (3, 20)


def test_init_plans_bypass_rules():
    cfg = cfg_for(exemption=10)
    params = [np.zeros(5), np.zeros((2, 3)), np.zeros((4, 4))]
    plans = init_plans(params, cfg)
    assert plans[0].bypass          # rank-1
    assert plans[1].bypass          # 6 elements < exemption
    assert not plans[2].bypass
    assert len(plans[2].states) == 1
    assert (plans[2].states[0].m, plans[2].states[0].n) == (4, 4)


def test_init_plans_chunking():
    cfg = cfg_for(max_order=5)
    plans = init_plans([np.zeros((12, 4))], cfg)
    assert len(plans[0].states) == 3  # rows split 4+4+4
    assert all(st.n == 4 for st in plans[0].states)


# -- the preconditioned step --------------------------------------------------


def test_shampoo_step_rejects_k0():
    cfg = cfg_for()
    params = [np.zeros((4, 4))]
    plans = init_plans(params, cfg)
    base = BaseOptimizerState("sgdm", lr=0.1)
    with pytest.raises(ValueError):
        shampoo_step(params, [np.ones((4, 4))], plans, base, cfg, 0)


def test_identity_roots_reduce_to_base_optimizer():
    # before any refresh (warm start off) the preconditioner is the identity
    cfg = cfg_for(warm_start=False, grafting=False, t1=100, t2=100)
    W1 = np.full((4, 4), 2.0)
    W2 = np.full((4, 4), 2.0)
    G = np.arange(16, dtype=np.float64).reshape(4, 4)
    plans = init_plans([W1], cfg)
    shampoo_step([W1], [G.copy()], plans, BaseOptimizerState("sgdm", lr=0.1),
                 cfg, 1)
    sgdm_step({}, W2, G.copy(), lr=0.1)
    np.testing.assert_array_equal(W1, W2)


def test_grafting_preserves_gradient_norm():
    cfg = cfg_for(grafting=True, t1=1, t2=1, warm_start=True)
    rng = np.random.default_rng(4)
    W = rng.standard_normal((6, 6))
    G = rng.standard_normal((6, 6))
    plans = init_plans([W], cfg)
    base = BaseOptimizerState("sgdm", lr=1.0, momentum=0.0)
    W0 = W.copy()
    shampoo_step([W], [G], plans, base, cfg, 1)
    step = W0 - W  # lr=1, zero momentum: the step IS the preconditioned grad
    assert np.linalg.norm(step) == pytest.approx(np.linalg.norm(G), rel=1e-12)
    assert not np.allclose(step, G)  # ...but the direction changed


def test_update_and_refresh_cadence():
    cfg = cfg_for(mode="vq4", warm_start=False, t1=3, t2=6)
    W = np.zeros((4, 4))
    plans = init_plans([W], cfg)
    st = plans[0].states[0]
    base = BaseOptimizerState("sgdm", lr=0.01)
    rng = np.random.default_rng(5)
    from qshampoo.quant import build_codebook

    cb = build_codebook(4, "linear2")
    stats, roots = [], []
    for k in range(1, 7):
        shampoo_step([W], [rng.standard_normal((4, 4))], plans, base, cfg, k)
        stats.append(reconstruct_side(st.left, cb).copy())
        from qshampoo.state import dequantize_root

        roots.append(dequantize_root(st.root_left, cb))
    # statistic frozen on steps 1-2, changes at 3, frozen 4-5, changes at 6
    np.testing.assert_array_equal(stats[0], stats[1])
    assert not np.array_equal(stats[1], stats[2])
    np.testing.assert_array_equal(stats[2], stats[4])
    assert not np.array_equal(stats[4], stats[5])
    # root refreshed only at step 6
    np.testing.assert_array_equal(roots[0], np.eye(4))
    np.testing.assert_array_equal(roots[4], np.eye(4))
    assert not np.array_equal(roots[5], np.eye(4))


def test_warm_start_refreshes_at_first_step():
    cfg = cfg_for(mode="full32", warm_start=True, t1=10, t2=10)
    W = np.zeros((4, 4))
    plans = init_plans([W], cfg)
    base = BaseOptimizerState("sgdm", lr=0.01)
    shampoo_step([W], [np.eye(4)], plans, base, cfg, 1)
    assert not np.array_equal(plans[0].states[0].root_left, np.eye(4))


@pytest.mark.parametrize("kind", ["sgdm", "adamw", "rmsprop"])
def test_full32_descends_on_quadratic(kind):
    prob = quadratic_problem(8, 8, cond=10.0, seed=0)
    params = prob.init()
    cfg = cfg_for(t1=2, t2=10)
    plans = init_plans(params, cfg)
    lr = {"sgdm": 0.05, "adamw": 0.05, "rmsprop": 0.01}[kind]
    base = BaseOptimizerState(kind, lr=lr)
    first = prob.loss(params)
    for k in range(1, 121):
        shampoo_step(params, prob.grad(params), plans, base, cfg, k)
    assert prob.loss(params) < 0.05 * first


def test_chunked_layer_trains():
    prob = quadratic_problem(12, 6, cond=5.0, seed=1)
    params = prob.init()
    cfg = cfg_for(max_order=5, t1=1, t2=5)  # forces 3x2 chunk grid
    plans = init_plans(params, cfg)
    assert len(plans[0].states) == 6
    base = BaseOptimizerState("sgdm", lr=0.05)
    first = prob.loss(params)
    for k in range(1, 81):
        shampoo_step(params, prob.grad(params), plans, base, cfg, k)
    assert prob.loss(params) < first


def test_config_validation():
    with pytest.raises(ValueError):
        ShampooConfig(beta=1.0)
    with pytest.raises(ValueError):
        ShampooConfig(t1=0)
    with pytest.raises(ValueError):
        ShampooConfig(max_order=8, block=64)
    with pytest.raises(ValueError):
        ShampooConfig(mode="fp16")
    with pytest.raises(ValueError):
        ShampooConfig(eps=-1e-9)


def test_layer_plan_dataclass_shape():
    plan = LayerPlan(shape=(3, 3), shape2d=(3, 3), bypass=True)
    assert plan.chunks == [] and plan.states == []
