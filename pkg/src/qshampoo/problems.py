"""Desk-scale differentiable objectives with exact gradient oracles.

Each factory returns a :class:`Problem` bundling seeded data, a loss, an
analytic gradient, a deterministic parameter initializer, and a mini-batch
index stream (sampling without replacement, reshuffled every epoch). Batches
are index arrays into the problem's fixed dataset; deterministic problems
(the quadratic) accept ``batch=None``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass
class Problem:
    name: str
    param_shapes: list[tuple[int, ...]]
    n_samples: int
    loss: Callable
    grad: Callable
    init: Callable
    optimum: float | None = None

    def batches(self, batch_size: int, seed: int):
        """Infinite stream of index batches; each epoch is a fresh seeded
        permutation split into contiguous chunks (exact cover when
        ``batch_size`` divides ``n_samples``)."""
        rng = np.random.default_rng(seed)
        while True:
            perm = rng.permutation(self.n_samples)
            for start in range(0, self.n_samples, batch_size):
                yield perm[start:start + batch_size]

    def epoch_batches(self, batch_size: int, seed: int) -> list[np.ndarray]:
        """The batches of a single epoch, for unbiasedness checks."""
        rng = np.random.default_rng(seed)
        perm = rng.permutation(self.n_samples)
        return [perm[s:s + batch_size]
                for s in range(0, self.n_samples, batch_size)]


def _orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    Q, R = np.linalg.qr(rng.standard_normal((n, n)))
    return Q * np.sign(np.diagonal(R))


def _conditioned(n: int, cond: float, rng: np.random.Generator) -> np.ndarray:
    """Square matrix with geometric singular values and condition ``cond``."""
    if cond < 1.0:
        raise ValueError("condition number must be >= 1")
    s = np.geomspace(1.0 / np.sqrt(cond), np.sqrt(cond), n)
    return (_orthogonal(n, rng) * s) @ _orthogonal(n, rng).T


def quadratic_problem(m: int, n: int, cond: float, seed: int, *,
                      cond_b: float = 1.0, identity: bool = False,
                      zero_target: bool = False) -> Problem:
    """f(W) = ½‖A·W·B − C‖²_F with seeded conditioned A (m×m), B (n×n).

    C = A·W*·B for a seeded W*, so the optimum value is 0 and the minimizer
    is known. ``identity`` fixes A = B = I; ``zero_target`` fixes C = 0 (the
    minimizer becomes W = 0 for nonsingular A, B).
    """
    rng = np.random.default_rng(seed)
    if identity:
        A, B = np.eye(m), np.eye(n)
    else:
        A = _conditioned(m, cond, rng)
        B = _conditioned(n, cond_b, rng)
    Wstar = rng.standard_normal((m, n))
    C = np.zeros((m, n)) if zero_target else A @ Wstar @ B

    def loss(params, batch=None):
        R = A @ params[0] @ B - C
        return 0.5 * float(np.sum(R * R))

    def grad(params, batch=None):
        R = A @ params[0] @ B - C
        return [A.T @ R @ B.T]

    def init():
        return [np.zeros((m, n))]

    return Problem("quadratic", [(m, n)], 1, loss, grad, init, optimum=0.0)


def logistic_problem(d: int, n_samples: int, seed: int) -> Problem:
    """Binary softmax classification on separable-with-noise synthetic data.

    Parameter is a d×2 weight matrix; loss is mean cross-entropy over the
    batch. At zero weights both logits tie, so the loss is log 2 exactly.
    """
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n_samples, d))
    w_true = rng.standard_normal(d)
    w_true /= np.linalg.norm(w_true)
    margin = X @ w_true + 0.3 * rng.standard_normal(n_samples)
    y = (margin > 0).astype(np.int64)
    onehot = np.eye(2)[y]

    def _softmax(Z):
        Z = Z - Z.max(axis=1, keepdims=True)
        E = np.exp(Z)
        return E / E.sum(axis=1, keepdims=True)

    def _select(batch):
        if batch is None:
            return X, onehot
        return X[batch], onehot[batch]

    def loss(params, batch=None):
        Xb, Yb = _select(batch)
        P = _softmax(Xb @ params[0])
        return float(-np.mean(np.sum(Yb * np.log(P + 1e-300), axis=1)))

    def grad(params, batch=None):
        Xb, Yb = _select(batch)
        P = _softmax(Xb @ params[0])
        return [Xb.T @ (P - Yb) / Xb.shape[0]]

    def init():
        return [np.zeros((d, 2))]

    return Problem("logistic", [(d, 2)], n_samples, loss, grad, init)


def mlp_problem(d_in: int, hidden: int, d_out: int, n_samples: int,
                activation: str, seed: int) -> Problem:
    """Two-layer regression network with manual backpropagation.

    Parameters are [W1 (hidden×d_in), b1, W2 (d_out×hidden), b2]; biases are
    rank-1 and therefore bypass preconditioning in the optimizer. Targets
    come from a seeded tanh teacher network plus noise.
    """
    if activation not in ("tanh", "relu"):
        raise ValueError(f"unknown activation {activation!r}")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n_samples, d_in))
    T1 = rng.standard_normal((hidden, d_in)) / np.sqrt(d_in)
    T2 = rng.standard_normal((d_out, hidden)) / np.sqrt(hidden)
    Y = np.tanh(X @ T1.T) @ T2.T + 0.05 * rng.standard_normal((n_samples, d_out))

    def _act(Z):
        return np.tanh(Z) if activation == "tanh" else np.maximum(Z, 0.0)

    def _act_grad(Z):
        if activation == "tanh":
            t = np.tanh(Z)
            return 1.0 - t * t
        return (Z > 0.0).astype(np.float64)

    def _forward(params, Xb):
        W1, b1, W2, b2 = params
        Z = Xb @ W1.T + b1
        H = _act(Z)
        return Z, H, H @ W2.T + b2

    def _select(batch):
        if batch is None:
            return X, Y
        return X[batch], Y[batch]

    def loss(params, batch=None):
        Xb, Yb = _select(batch)
        _, _, P = _forward(params, Xb)
        return 0.5 * float(np.mean(np.sum((P - Yb) ** 2, axis=1)))

    def grad(params, batch=None):
        W1, b1, W2, b2 = params
        Xb, Yb = _select(batch)
        Z, H, P = _forward(params, Xb)
        dP = (P - Yb) / Xb.shape[0]
        dW2 = dP.T @ H
        db2 = dP.sum(axis=0)
        dZ = (dP @ W2) * _act_grad(Z)
        dW1 = dZ.T @ Xb
        db1 = dZ.sum(axis=0)
        return [dW1, db1, dW2, db2]

    def init():
        r = np.random.default_rng(seed + 1)
        W1 = r.standard_normal((hidden, d_in)) / np.sqrt(d_in)
        W2 = r.standard_normal((d_out, hidden)) / np.sqrt(hidden)
        return [W1, np.zeros(hidden), W2, np.zeros(d_out)]

    return Problem("mlp", [(hidden, d_in), (hidden,), (d_out, hidden), (d_out,)],
                   n_samples, loss, grad, init)
