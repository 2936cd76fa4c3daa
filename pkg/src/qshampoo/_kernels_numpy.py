"""Pure-numpy block-quantization kernels.

Reference implementation; the numba twin in ``_kernels_numba`` must match it
bit for bit. Contracts shared by both backends:

  block_norms(X, block)            -> (nbr, nbc) float64, max |X| per block
  assign_codes(X, norms, mids, block, zero_code) -> (rows, cols) uint8
  reconstruct(codes, norms, values, block)       -> (rows, cols) float64

Code assignment is nearest-codebook-value with ties broken toward the
smaller index, realized as a binary search over the midpoints between
adjacent codebook values (numpy ``searchsorted`` with side='left').
Blocks whose norm is zero receive ``zero_code`` everywhere and reconstruct
to exact zeros.
"""

from __future__ import annotations

import numpy as np


def block_norms(X: np.ndarray, block: int) -> np.ndarray:
    rows, cols = X.shape
    nbr = (rows + block - 1) // block
    nbc = (cols + block - 1) // block
    norms = np.empty((nbr, nbc), dtype=np.float64)
    for bi in range(nbr):
        for bj in range(nbc):
            sub = X[bi * block : (bi + 1) * block, bj * block : (bj + 1) * block]
            norms[bi, bj] = np.max(np.abs(sub)) if sub.size else 0.0
    return norms


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
        for bj in range(nbc):
            rs = slice(bi * block, min((bi + 1) * block, rows))
            cs = slice(bj * block, min((bj + 1) * block, cols))
            n = norms[bi, bj]
            if n == 0.0:
                codes[rs, cs] = zero_code
            else:
                y = X[rs, cs] / n
                codes[rs, cs] = np.searchsorted(midpoints, y, side="left").astype(
                    np.uint8
                )
    return codes


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
        for bj in range(nbc):
            rs = slice(bi * block, min((bi + 1) * block, rows))
            cs = slice(bj * block, min((bj + 1) * block, cols))
            out[rs, cs] = norms[bi, bj] * values[codes[rs, cs]]
    return out
