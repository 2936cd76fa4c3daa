"""Dense linear-algebra kernels for the preconditioner pipeline.

Everything computes in float64. Matrix conventions (no wrapper types):
SPD/symmetric matrices and Cholesky factors are plain numpy arrays; factors
are lower-triangular with a positive diagonal. The inverse quarter-root uses
a coupled Newton iteration with an eigendecomposition fallback that is also
the accuracy oracle in the tests.
"""

from __future__ import annotations

import numpy as np


class FactorizationError(RuntimeError):
    """Cholesky factorization failed (matrix not PD after regularization)."""


def cholesky(A: np.ndarray, eps: float = 0.0) -> np.ndarray:
    """Lower-triangular C with C @ C.T = A + eps*I; raises FactorizationError."""
    if eps < 0:
        raise ValueError("eps must be >= 0")
    T = A if eps == 0.0 else A + eps * np.eye(A.shape[0])
    try:
        return np.linalg.cholesky(T)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(str(exc)) from exc


def cholesky_retry(
    A: np.ndarray, eps: float, retries: int = 3
) -> tuple[np.ndarray, float]:
    """Cholesky with escalating regularization: eps grows 10x per retry.

    Returns (factor, eps actually used). A zero eps escalates from a scale-
    relative floor on the first retry.
    """
    cur = eps
    for attempt in range(retries + 1):
        try:
            return cholesky(A, cur), cur
        except FactorizationError:
            if attempt == retries:
                raise
            if cur == 0.0:
                scale = float(np.max(np.abs(A))) or 1.0
                cur = 1e-12 * scale
            else:
                cur *= 10.0
    raise FactorizationError("unreachable")


def max_singular_value(A: np.ndarray, iters: int = 100, tol: float = 1e-10) -> float:
    """Dominant-eigenvalue estimate of a symmetric matrix by power iteration.

    Deterministic all-ones start vector; returns 0.0 for the zero matrix.
    For PSD inputs this is the largest singular value.
    """
    n = A.shape[0]
    v = np.full(n, 1.0 / np.sqrt(n))
    lam = 0.0
    for _ in range(iters):
        w = A @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        new_lam = float(v @ (A @ v))
        if abs(new_lam - lam) <= tol * abs(new_lam):
            return new_lam
        lam = new_lam
    return lam


def _eigh_inv_quarter_root(T: np.ndarray, floor: float) -> np.ndarray:
    """Inverse quarter-root via symmetric eigendecomposition.

    Eigenvalues are clamped below at ``floor`` so indefinite inputs still
    produce a finite symmetric result.
    """
    w, U = np.linalg.eigh((T + T.T) / 2.0)
    w = np.maximum(w, floor)
    X = (U * w ** -0.25) @ U.T
    return (X + X.T) / 2.0


def inv_quarter_root(
    A: np.ndarray,
    lam_max: float,
    eps: float,
    max_iters: int = 100,
    tol: float = 1e-12,
) -> np.ndarray:
    """X ~= (A + lam_max*eps*I)^(-1/4) for symmetric A.

    Coupled Newton iteration (p = 4):
        z = (1+p) / (2*lam);  X_0 = z^(1/p) * I;  M_0 = z*T
        T_k = ((1 + 1/p)*I - M_k/p);  X <- X T_k;  M <- T_k^p M
    M_k stays equal to X_k^p T throughout, so driving M to I drives X to
    T^(-1/p). Falls back to the eigendecomposition route when the iteration
    stalls, diverges, or misses the residual contract
    ||X^4 T - I||_F / sqrt(n) <= 1e-6.
    """
    n = A.shape[0]
    I = np.eye(n)
    reg = lam_max * eps
    T = A + reg * I
    floor = max(reg, abs(lam_max) * 1e-16, np.finfo(np.float64).tiny)

    lam = lam_max * (1.0 + eps)
    if lam <= 0.0:
        return _eigh_inv_quarter_root(T, floor)

    z = (1.0 + 4.0) / (2.0 * lam)
    X = z**0.25 * I
    M = z * T
    prev_err = np.inf
    ok = False
    for _ in range(max_iters):
        err = float(np.max(np.abs(M - I)))
        if not np.isfinite(err) or err > prev_err * 1.2:
            break
        if err < tol:
            ok = True
            break
        prev_err = err
        Tk = 1.25 * I - 0.25 * M
        X = X @ Tk
        T2 = Tk @ Tk
        M = T2 @ T2 @ M
    else:
        ok = float(np.max(np.abs(M - I))) < 1e-8

    if ok:
        X = (X + X.T) / 2.0
        resid = np.linalg.norm(X @ X @ X @ X @ T - I) / np.sqrt(n)
        if np.isfinite(resid) and resid <= 1e-6:
            return X
    return _eigh_inv_quarter_root(T, floor)


def precondition(Lhat: np.ndarray, G: np.ndarray, Rhat: np.ndarray) -> np.ndarray:
    """Two-sided preconditioning Lhat @ G @ Rhat."""
    if Lhat.shape[1] != G.shape[0] or G.shape[1] != Rhat.shape[0]:
        raise ValueError(
            f"shape mismatch: {Lhat.shape} @ {G.shape} @ {Rhat.shape}"
        )
    return Lhat @ G @ Rhat


def vec(X: np.ndarray) -> np.ndarray:
    """Column-stacking vectorization."""
    return X.ravel(order="F")


def unvec(v: np.ndarray, m: int, n: int) -> np.ndarray:
    return v.reshape((m, n), order="F")


def kron_precondition(Lhat: np.ndarray, G: np.ndarray, Rhat: np.ndarray) -> np.ndarray:
    """Vectorized form of ``precondition``: unvec((Rhat^T (x) Lhat) vec(G)).

    Equal to the matrix form up to float rounding; used to cross-check the
    Kronecker identity.
    """
    H = np.kron(Rhat.T, Lhat)
    return unvec(H @ vec(G), G.shape[0], G.shape[1])


def synth_spd(n: int, lam_lo: float, lam_hi: float, seed: int) -> np.ndarray:
    """Random SPD matrix with geometrically spaced eigenvalues.

    Eigenbasis from the QR factorization of a seeded Gaussian matrix (sign-
    fixed for determinism); eigenvalues run geometrically from lam_lo to
    lam_hi, so the condition number is exactly lam_hi/lam_lo.
    """
    if n < 2:
        raise ValueError("n must be >= 2")
    if not 0 < lam_lo <= lam_hi:
        raise ValueError("need 0 < lam_lo <= lam_hi")
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((n, n))
    Q, R = np.linalg.qr(Z)
    Q = Q * np.sign(np.diag(R))
    if lam_lo == lam_hi:
        lams = np.full(n, lam_lo)
    else:
        lams = lam_lo * (lam_hi / lam_lo) ** np.linspace(0.0, 1.0, n)
    A = (Q * lams) @ Q.T
    return (A + A.T) / 2.0
