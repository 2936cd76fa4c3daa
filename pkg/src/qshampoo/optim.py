"""Base optimizers and the preconditioned (Shampoo) wrapper.

The wrapper maintains per-layer left/right statistics on a fast interval
(``t1``), refreshes the cached inverse fourth roots on a slow interval
(``t2``), preconditions each gradient as ``Ĝ = L̂ G R̂``, optionally grafts
the raw gradient's Frobenius norm onto the preconditioned direction, and
hands the result to a first-order base optimizer (SGDM / AdamW / RMSprop).

Layers larger than ``max_order`` along an axis are partitioned into
near-equal chunks, each with its own preconditioner pair. Rank-1 tensors
and tensors with fewer than ``exemption`` elements bypass preconditioning
entirely and go straight to the base optimizer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import state as state_mod
from .linalg import precondition
from .quant import build_codebook

_BASE_KINDS = ("sgdm", "adamw", "rmsprop")


@dataclass
class ShampooConfig:
    """All tunables for the preconditioned optimizer and its storage modes."""

    beta: float = 0.95
    beta_e: float = 0.95
    eps: float = 1e-6
    t1: int = 100
    t2: int = 500
    bits: int = 4
    block: int = 64
    max_order: int = 1200
    exemption: int = 4096
    grafting: bool = True
    mode: str = "full32"
    codebook: str = "linear2"
    norm_scope: str = "full"
    exact: bool = False
    warm_start: bool = True
    keep_factor_diag: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not (0.0 < self.beta < 1.0 and 0.0 < self.beta_e < 1.0):
            raise ValueError("momentum parameters must lie in (0, 1)")
        if self.t1 < 1 or self.t2 < 1:
            raise ValueError("update intervals must be >= 1")
        if self.max_order < self.block:
            raise ValueError("max_order must be >= block")
        if self.mode not in state_mod.MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.eps < 0:
            raise ValueError("eps must be non-negative")

    @property
    def cb(self):
        return build_codebook(self.bits, self.codebook)


# ---------------------------------------------------------------------------
# Base optimizers
#
# Per-tensor buffers live in a plain dict so the step functions stay pure
# in everything but the buffer they own.
# ---------------------------------------------------------------------------


def sgdm_step(buf: dict, W: np.ndarray, g: np.ndarray, lr: float,
              momentum: float = 0.9, weight_decay: float = 0.0) -> np.ndarray:
    """Heavy-ball momentum with decay folded into the buffer."""
    m = buf.get("m")
    if m is None:
        m = np.zeros_like(W)
    m = momentum * m + g + weight_decay * W
    buf["m"] = m
    W -= lr * m
    return W


def adamw_step(buf: dict, W: np.ndarray, g: np.ndarray, lr: float,
               beta1: float = 0.9, beta2: float = 0.999, c: float = 1e-8,
               weight_decay: float = 0.0) -> np.ndarray:
    """Decoupled weight decay plus bias-corrected moment estimates."""
    t = buf.get("t", 0) + 1
    m = buf.get("m")
    v = buf.get("v")
    if m is None:
        m, v = np.zeros_like(W), np.zeros_like(W)
    m = beta1 * m + (1.0 - beta1) * g
    v = beta2 * v + (1.0 - beta2) * g * g
    buf["t"], buf["m"], buf["v"] = t, m, v
    if weight_decay:
        W *= 1.0 - lr * weight_decay
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    W -= lr * mhat / (np.sqrt(vhat) + c)
    return W


def rmsprop_step(buf: dict, W: np.ndarray, g: np.ndarray, lr: float,
                 rho: float = 0.99, c: float = 1e-8) -> np.ndarray:
    v = buf.get("v")
    if v is None:
        v = np.zeros_like(W)
    v = rho * v + (1.0 - rho) * g * g
    buf["v"] = v
    W -= lr * g / (np.sqrt(v) + c)
    return W


@dataclass
class BaseOptimizerState:
    """First-order optimizer selection, hyperparameters, and buffers."""

    kind: str
    lr: float
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    rho: float = 0.99
    c: float = 1e-8
    weight_decay: float = 0.0
    buffers: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in _BASE_KINDS:
            raise ValueError(f"unknown base optimizer {self.kind!r}")

    def apply(self, idx: int, W: np.ndarray, g: np.ndarray) -> np.ndarray:
        buf = self.buffers.setdefault(idx, {})
        if self.kind == "sgdm":
            return sgdm_step(buf, W, g, self.lr, self.momentum,
                             self.weight_decay)
        if self.kind == "adamw":
            return adamw_step(buf, W, g, self.lr, self.beta1, self.beta2,
                              self.c, self.weight_decay)
        return rmsprop_step(buf, W, g, self.lr, self.rho, self.c)


# ---------------------------------------------------------------------------
# Layer partitioning
# ---------------------------------------------------------------------------


def _axis_chunks(d: int, max_order: int) -> list[slice]:
    """Split an axis into ceil(d/max_order) near-equal contiguous chunks."""
    k = math.ceil(d / max_order)
    base, rem = divmod(d, k)
    sizes = [base + 1] * rem + [base] * (k - rem)
    slices, start = [], 0
    for s in sizes:
        slices.append(slice(start, start + s))
        start += s
    return slices

def block_partition(shape: tuple[int, int], max_order: int) -> list[tuple[slice, slice]]:
    """Row-major list of (row slice, col slice) sub-matrix windows."""
    return [
        (rs, cs)
        for rs in _axis_chunks(shape[0], max_order)
        for cs in _axis_chunks(shape[1], max_order)
    ]


def _as_2d(shape: tuple[int, ...]) -> tuple[int, int] | None:
    """Matrix view of a tensor shape; None when preconditioning is skipped.

    Rank > 2 flattens trailing axes into the column dimension; rank-1 (and
    rank-0) tensors are handled by the base optimizer alone.
    """
    if len(shape) < 2:
        return None
    if len(shape) == 2:
        return shape
    return shape[0], int(np.prod(shape[1:]))


@dataclass
class LayerPlan:
    """Preconditioning layout for one parameter tensor."""

    shape: tuple[int, ...]
    shape2d: tuple[int, int] | None
    bypass: bool
    chunks: list[tuple[slice, slice]] = field(default_factory=list)
    states: list[state_mod.ShampooLayerState] = field(default_factory=list)


def init_plans(params: list[np.ndarray], cfg: ShampooConfig) -> list[LayerPlan]:
    plans = []
    for W in params:
        shape2d = _as_2d(W.shape)
        if shape2d is None or W.size < cfg.exemption:
            plans.append(LayerPlan(W.shape, shape2d, bypass=True))
            continue
        chunks = block_partition(shape2d, cfg.max_order)
        states = [
            state_mod.init_state(rs.stop - rs.start, cs.stop - cs.start,
                                 cfg.mode, cfg)
            for rs, cs in chunks
        ]
        plans.append(LayerPlan(W.shape, shape2d, False, chunks, states))
    return plans


# ---------------------------------------------------------------------------
# The preconditioned step
# ---------------------------------------------------------------------------


def _precondition_chunk(st: state_mod.ShampooLayerState, g: np.ndarray,
                        cb, cfg: ShampooConfig) -> np.ndarray:
    Lhat = state_mod.dequantize_root(st.root_left, cb)
    Rhat = state_mod.dequantize_root(st.root_right, cb)
    gh = precondition(Lhat, g, Rhat)
    if cfg.grafting:
        ng = np.linalg.norm(g)
        ngh = np.linalg.norm(gh)
        if ngh == 0.0:
            return g.copy()
        return gh * (ng / ngh)
    return gh


def shampoo_step(params: list[np.ndarray], grads: list[np.ndarray],
                 plans: list[LayerPlan], base: BaseOptimizerState,
                 cfg: ShampooConfig, k: int) -> None:
    """One optimizer iteration; ``k`` counts from 1.

    Statistics update on the fast interval, root refresh on the slow one
    (both also at k = 1 when warm start is on, so the very first
    preconditioned step is meaningful); the statistic update precedes the
    refresh within a step.
    """
    if k < 1:
        raise ValueError("step counter starts at 1")
    cb = cfg.cb
    do_update = (k % cfg.t1 == 0) or (cfg.warm_start and k == 1)
    do_refresh = (k % cfg.t2 == 0) or (cfg.warm_start and k == 1)
    for idx, (W, G, plan) in enumerate(zip(params, grads, plans)):
        if plan.bypass:
            base.apply(idx, W, G)
            continue
        G2 = G.reshape(plan.shape2d)
        P = np.empty_like(G2)
        for (rs, cs), st in zip(plan.chunks, plan.states):
            g = G2[rs, cs]
            if do_update:
                state_mod.update_state(st, g, cfg)
            if do_refresh:
                state_mod.refresh_roots(st, cfg.eps, cb, cfg)
            P[rs, cs] = _precondition_chunk(st, g, cb, cfg)
            st.step = k
        base.apply(idx, W, P.reshape(plan.shape))
