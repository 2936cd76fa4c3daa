"""Block-wise low-bit quantization with per-block max-abs normalization.

A matrix is tiled into ``block`` x ``block`` blocks; each block is scaled by
its own normalization factor N_p = max|X_p| into [-1, 1] and every entry is
mapped to the nearest codebook value (ties toward the smaller index). Two
codebooks are provided:

  * ``linear2`` — the signed-square mapping M(j) = sign(u) * u^2 with
    u = -1 + 2j/(2^b - 1) and the middle code pinned to exactly 0. Denser
    near zero; the default for optimizer states.
  * ``linear``  — the uniform midpoint grid M(j) = -1 + (2j+1)/2^b, whose
    worst-case round-trip error is exactly 2^-b of the block norm.

Matrices with fewer elements than the exemption threshold are stored
verbatim at full precision (``exempt_payload``). For symmetric/triangular
matrices, ``quantize_offdiag`` keeps the diagonal at full precision and
quantizes only the off-diagonal part; the normalization factor can include
the diagonal entries (``norm_scope='full'``, the default) or be computed
from the off-diagonal entries alone (``norm_scope='offdiag'``).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import backend

_KINDS = ("linear", "linear2")


@dataclass(frozen=True)
class QuantCodebook:
    """A b-bit code-to-value mapping plus the derived search midpoints."""

    bits: int
    kind: str
    values: np.ndarray  # (2**bits,) float64, strictly increasing
    midpoints: np.ndarray  # (2**bits - 1,) float64

    @property
    def max_half_gap(self) -> float:
        """Largest half-distance between adjacent codebook values."""
        return float(np.max(np.diff(self.values)) / 2.0)

    @property
    def zero_code(self) -> int:
        """Code used for entries of zero-norm blocks: 2^(b-1) - 1."""
        return (1 << (self.bits - 1)) - 1


@lru_cache(maxsize=None)
def build_codebook(bits: int, kind: str = "linear2") -> QuantCodebook:
    if not 2 <= bits <= 8:
        raise ValueError(f"unsupported bit width {bits}; expected 2..8")
    if kind not in _KINDS:
        raise ValueError(f"unknown codebook kind {kind!r}; expected {_KINDS}")
    n = 1 << bits
    j = np.arange(n, dtype=np.float64)
    if kind == "linear2":
        u = -1.0 + 2.0 * j / (n - 1)
        values = np.sign(u) * u * u
        values[(n >> 1) - 1] = 0.0
    else:
        values = -1.0 + (2.0 * j + 1.0) / n
    values.flags.writeable = False
    midpoints = (values[:-1] + values[1:]) / 2.0
    midpoints.flags.writeable = False
    return QuantCodebook(bits=bits, kind=kind, values=values, midpoints=midpoints)


def quantize_scalar(x: float, cb: QuantCodebook) -> int:
    """Nearest-code index for x in [-1, 1]; exact ties pick the smaller index."""
    assert abs(x) <= 1.0 + 1e-12, f"normalized value {x} outside [-1, 1]"
    x = min(1.0, max(-1.0, x))
    return int(np.searchsorted(cb.midpoints, x, side="left"))


@dataclass
class QuantizedBlockMatrix:
    """Packed b-bit codes plus one normalization factor per block.

    Exactly one of (codes, norms) or exempt_payload is populated; exempt
    matrices (element count below the exemption threshold) keep the original
    full-precision data.
    """

    rows: int
    cols: int
    block_size: int
    bits: int
    kind: str
    codes: np.ndarray | None = None  # (rows, cols) uint8
    norms: np.ndarray | None = None  # (nbr, nbc) float64
    exempt_payload: np.ndarray | None = None

    @property
    def is_exempt(self) -> bool:
        return self.exempt_payload is not None

    def num_blocks(self) -> int:
        b = self.block_size
        return ((self.rows + b - 1) // b) * ((self.cols + b - 1) // b)


def _check_input(X: np.ndarray) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=np.float64)
    if not np.all(np.isfinite(X)):
        raise ValueError("matrix contains non-finite entries")
    return X


def quantize_matrix(
    X: np.ndarray,
    cb: QuantCodebook,
    block: int = 64,
    exemption: int = 0,
) -> QuantizedBlockMatrix:
    if block < 1:
        raise ValueError("block size must be >= 1")
    X = _check_input(X)
    rows, cols = X.shape
    if rows * cols < exemption:
        return QuantizedBlockMatrix(
            rows, cols, block, cb.bits, cb.kind, exempt_payload=X.copy()
        )
    k = backend.kernels()
    norms = k.block_norms(X, block)
    codes = k.assign_codes(X, norms, cb.midpoints, block, cb.zero_code)
    return QuantizedBlockMatrix(
        rows, cols, block, cb.bits, cb.kind, codes=codes, norms=norms
    )


def dequantize_matrix(Q: QuantizedBlockMatrix, cb: QuantCodebook) -> np.ndarray:
    if Q.is_exempt:
        return Q.exempt_payload.copy()
    return backend.kernels().reconstruct(Q.codes, Q.norms, cb.values, Q.block_size)


def quantize_offdiag(
    S: np.ndarray,
    cb: QuantCodebook,
    block: int = 64,
    exemption: int = 0,
    norm_scope: str = "full",
) -> tuple[QuantizedBlockMatrix, np.ndarray]:
    """Quantize the off-diagonal part of a square matrix; diagonal stays exact.

    Returns (quantized off-diagonal matrix, full-precision diagonal). The
    diagonal positions of the code grid carry dead codes (the code for 0).
    """
    if norm_scope not in ("full", "offdiag"):
        raise ValueError(f"norm_scope must be 'full' or 'offdiag', got {norm_scope!r}")
    S = _check_input(S)
    if S.shape[0] != S.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {S.shape}")
    diag = np.diagonal(S).copy()
    n = S.shape[0]
    if n * n < exemption:
        q = QuantizedBlockMatrix(
            n, n, block, cb.bits, cb.kind, exempt_payload=S.copy()
        )
        return q, diag
    off = S.copy()
    np.fill_diagonal(off, 0.0)
    k = backend.kernels()
    norms = k.block_norms(S if norm_scope == "full" else off, block)
    codes = k.assign_codes(off, norms, cb.midpoints, block, cb.zero_code)
    q = QuantizedBlockMatrix(n, n, block, cb.bits, cb.kind, codes=codes, norms=norms)
    return q, diag


def dequantize_offdiag(
    Q: QuantizedBlockMatrix,
    diag: np.ndarray,
    cb: QuantCodebook,
    symmetrize: bool = False,
) -> np.ndarray:
    """Reconstruct a square matrix from its quantized off-diagonal + diagonal.

    Order: dequantize, restore the diagonal, then (optionally) symmetrize.
    """
    out = dequantize_matrix(Q, cb)
    np.fill_diagonal(out, diag)
    if symmetrize:
        out = (out + out.T) / 2.0
    return out


# ---------------------------------------------------------------------------
# Packed serialization
#
# Codes are written as a continuous little-endian bitstream: each code
# occupies `bits` bits, least-significant bit first, zero-padded to a byte
# boundary. For 4-bit codes this is two codes per byte, low nibble first.
# Stream order is row-major within each block, blocks in row-major order.
# ---------------------------------------------------------------------------

_MAGIC = b"QBM1"
_FLAG_EXEMPT = 1


def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    codes = np.ascontiguousarray(codes, dtype=np.uint8).ravel()
    bit_rows = np.unpackbits(codes[:, None], axis=1, bitorder="little")[:, :bits]
    return np.packbits(bit_rows.ravel(), bitorder="little").tobytes()


def unpack_codes(buf: bytes, count: int, bits: int) -> np.ndarray:
    raw = np.frombuffer(buf, dtype=np.uint8)
    flat = np.unpackbits(raw, bitorder="little")[: count * bits]
    bit_rows = np.zeros((count, 8), dtype=np.uint8)
    bit_rows[:, :bits] = flat.reshape(count, bits)
    return np.packbits(bit_rows, axis=1, bitorder="little").ravel()


def _block_order(codes: np.ndarray, block: int) -> np.ndarray:
    """Flatten a code grid block by block (blocks row-major, rows within)."""
    rows, cols = codes.shape
    parts = []
    for bi in range((rows + block - 1) // block):
        for bj in range((cols + block - 1) // block):
            parts.append(
                codes[
                    bi * block : (bi + 1) * block, bj * block : (bj + 1) * block
                ].ravel()
            )
    return np.concatenate(parts) if parts else np.empty(0, dtype=np.uint8)


def _block_unorder(flat: np.ndarray, rows: int, cols: int, block: int) -> np.ndarray:
    codes = np.empty((rows, cols), dtype=np.uint8)
    pos = 0
    for bi in range((rows + block - 1) // block):
        for bj in range((cols + block - 1) // block):
            r0, r1 = bi * block, min((bi + 1) * block, rows)
            c0, c1 = bj * block, min((bj + 1) * block, cols)
            size = (r1 - r0) * (c1 - c0)
            codes[r0:r1, c0:c1] = flat[pos : pos + size].reshape(r1 - r0, c1 - c0)
            pos += size
    return codes


def serialize_qbm(Q: QuantizedBlockMatrix) -> bytes:
    flags = _FLAG_EXEMPT if Q.is_exempt else 0
    kind_id = _KINDS.index(Q.kind)
    head = _MAGIC + struct.pack(
        "<IIIBBB", Q.rows, Q.cols, Q.block_size, Q.bits, kind_id, flags
    )
    if Q.is_exempt:
        return head + np.ascontiguousarray(Q.exempt_payload, dtype="<f8").tobytes()
    norm_bytes = np.ascontiguousarray(Q.norms, dtype="<f8").tobytes()
    code_bytes = pack_codes(_block_order(Q.codes, Q.block_size), Q.bits)
    return head + norm_bytes + code_bytes


def deserialize_qbm(buf: bytes) -> QuantizedBlockMatrix:
    if buf[:4] != _MAGIC:
        raise ValueError("bad magic; not a packed quantized matrix")
    rows, cols, block, bits, kind_id, flags = struct.unpack("<IIIBBB", buf[4:19])
    kind = _KINDS[kind_id]
    body = buf[19:]
    if flags & _FLAG_EXEMPT:
        payload = np.frombuffer(body, dtype="<f8").reshape(rows, cols).copy()
        return QuantizedBlockMatrix(
            rows, cols, block, bits, kind, exempt_payload=payload
        )
    nbr = (rows + block - 1) // block
    nbc = (cols + block - 1) // block
    nb = nbr * nbc * 8
    norms = np.frombuffer(body[:nb], dtype="<f8").reshape(nbr, nbc).copy()
    flat = unpack_codes(body[nb:], rows * cols, bits)
    codes = _block_unorder(flat, rows, cols, block)
    return QuantizedBlockMatrix(rows, cols, block, bits, kind, codes=codes, norms=norms)
