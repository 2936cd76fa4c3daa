"""Numba-jitted block-quantization kernels.

Same contracts as ``_kernels_numpy`` (see that module's docstring); outputs
must be bit-identical. The nearest-code binary search below reproduces
``np.searchsorted(midpoints, y, side='left')`` exactly: it returns the first
index whose midpoint is >= y, so an exact tie lands on the smaller code.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _find_code(y: float, midpoints: np.ndarray) -> int:
    lo = 0
    hi = midpoints.shape[0]
    while lo < hi:
        mid = (lo + hi) // 2
        if midpoints[mid] < y:
            lo = mid + 1
        else:
            hi = mid
    return lo


@njit(cache=True)
def block_norms(X: np.ndarray, block: int) -> np.ndarray:
    rows, cols = X.shape
    nbr = (rows + block - 1) // block
    nbc = (cols + block - 1) // block
    norms = np.zeros((nbr, nbc), dtype=np.float64)
    for bi in range(nbr):
        r0 = bi * block
        r1 = min(r0 + block, rows)
        for bj in range(nbc):
            c0 = bj * block
            c1 = min(c0 + block, cols)
            m = 0.0
            for i in range(r0, r1):
                for j in range(c0, c1):
                    a = abs(X[i, j])
                    if a > m:
                        m = a
            norms[bi, bj] = m
    return norms


@njit(cache=True)
def assign_codes(
    X: np.ndarray,
    norms: np.ndarray,
    midpoints: np.ndarray,
    block: int,
    zero_code: int,
) -> np.ndarray:
    rows, cols = X.shape
    codes = np.empty((rows, cols), dtype=np.uint8)
    nbr, nbc = norms.shape
    for bi in range(nbr):
        r0 = bi * block
        r1 = min(r0 + block, rows)
        for bj in range(nbc):
            c0 = bj * block
            c1 = min(c0 + block, cols)
            n = norms[bi, bj]
            if n == 0.0:
                for i in range(r0, r1):
                    for j in range(c0, c1):
                        codes[i, j] = zero_code
            else:
                for i in range(r0, r1):
                    for j in range(c0, c1):
                        codes[i, j] = _find_code(X[i, j] / n, midpoints)
    return codes


@njit(cache=True)
def reconstruct(
    codes: np.ndarray,
    norms: np.ndarray,
    values: np.ndarray,
    block: int,
) -> np.ndarray:
    rows, cols = codes.shape
    out = np.empty((rows, cols), dtype=np.float64)
    nbr, nbc = norms.shape
    for bi in range(nbr):
        r0 = bi * block
        r1 = min(r0 + block, rows)
        for bj in range(nbc):
            c0 = bj * block
            c1 = min(c0 + block, cols)
            n = norms[bi, bj]
            for i in range(r0, r1):
                for j in range(c0, c1):
                    out[i, j] = n * values[codes[i, j]]
    return out
