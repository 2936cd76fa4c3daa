"""Per-layer Shampoo preconditioner state for four storage modes.

Modes
-----
``full32``
    Left/right statistics and root caches held as dense float arrays.
``vq4``
    Statistics quantized directly (off-diagonal codes + exact diagonal).
``cq4``
    Statistics represented by their quantized Cholesky factor; the
    reconstruction ``D(C̄) D(C̄)ᵀ`` is a Gram matrix and therefore PSD no
    matter how coarse the codes are.
``cq4ef``
    Like ``cq4`` plus a quantized error state that compensates the factor
    before each quantization. Factor and error share one square code grid:
    the factor occupies the strict lower triangle, the error state is kept
    transposed in the strict upper triangle, so the pair costs exactly as
    many code bytes as one vanilla-quantized matrix.

Root caches (the inverse fourth roots actually applied to gradients) are
stored off-diagonal-quantized in every quantized mode and refreshed on the
slow interval.

In exact mode (``cfg.exact``) every quantization call routes through the
exemption path and stores the raw matrix, which turns all four modes into
arithmetically identical trajectories up to the Cholesky regularizer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .quant import (
    QuantCodebook,
    QuantizedBlockMatrix,
    build_codebook,
    dequantize_matrix,
    dequantize_offdiag,
    deserialize_qbm,
    quantize_matrix,
    quantize_offdiag,
    serialize_qbm,
)

MODES = ("full32", "vq4", "cq4", "cq4ef")

# exemption threshold larger than any desk-scale element count; routing a
# quantize call through it stores the input verbatim (exact mode)
_EXEMPT_ALL = 1 << 62


def _exemption(cfg) -> int:
    """Element-count threshold below which a matrix is stored unquantized.

    Exact mode exempts everything; otherwise matrices smaller than the
    config's exemption threshold keep full-precision payloads, mirroring the
    small-tensor carve-out of block-wise optimizer quantization.
    """
    if getattr(cfg, "exact", False):
        return _EXEMPT_ALL
    return getattr(cfg, "exemption", 0)


def _sym(X: np.ndarray) -> np.ndarray:
    return (X + X.T) / 2.0


# ---------------------------------------------------------------------------
# Payload containers
# ---------------------------------------------------------------------------


@dataclass
class QuantizedSide:
    """One off-diagonal-quantized symmetric matrix (VQ4 state or root cache)."""

    qbm: QuantizedBlockMatrix
    diag: np.ndarray

    def dequantize(self, cb: QuantCodebook, symmetrize: bool = True) -> np.ndarray:
        return dequantize_offdiag(self.qbm, self.diag, cb, symmetrize=symmetrize)


@dataclass
class PackedFactorPair:
    """Cholesky factor and error state sharing one square code grid.

    ``codes`` strict lower triangle: factor codes. Strict upper triangle:
    error-state codes, transposed (the error state is strictly lower
    triangular with an implicit zero diagonal). The factor diagonal lives in
    ``diag`` at full precision unless the pair was built in full-factor
    (toy) mode, in which case the grid's diagonal codes are live.

    Norm grids are kept separately per payload because factor and error
    magnitudes differ by orders of magnitude.
    """

    order: int
    block: int
    bits: int
    kind: str
    codes: np.ndarray  # (n, n) uint8
    diag: np.ndarray | None  # None in full-factor mode
    factor_norms: np.ndarray | None
    error_norms: np.ndarray | None = None
    factor_exempt: np.ndarray | None = None
    error_exempt: np.ndarray | None = None
    full_factor: bool = False

    @property
    def has_error(self) -> bool:
        return self.error_norms is not None or self.error_exempt is not None

    def _qbm(self, codes: np.ndarray, norms: np.ndarray) -> QuantizedBlockMatrix:
        return QuantizedBlockMatrix(
            self.order, self.order, self.block, self.bits, self.kind,
            codes=codes, norms=norms,
        )

    def unpack_factor(self, cb: QuantCodebook) -> np.ndarray:
        """Dequantize the stored factor as a lower-triangular matrix."""
        if self.factor_exempt is not None:
            return self.factor_exempt.copy()
        # Codes above the diagonal belong to the error state; whatever they
        # dequantize to under the factor norms is discarded by the tril.
        M = dequantize_matrix(self._qbm(self.codes, self.factor_norms), cb)
        if self.full_factor:
            return np.tril(M)
        C = np.tril(M, -1)
        np.fill_diagonal(C, self.diag)
        return C

    def unpack_error(self, cb: QuantCodebook) -> np.ndarray:
        """Dequantize the stored error state (strictly lower triangular)."""
        if self.error_exempt is not None:
            return self.error_exempt.copy()
        if self.error_norms is None:
            return np.zeros((self.order, self.order))
        codes_t = np.ascontiguousarray(self.codes.T)
        E = dequantize_matrix(self._qbm(codes_t, self.error_norms), cb)
        return np.tril(E, -1)


def pack_factor_pair(
    qf: QuantizedBlockMatrix,
    diag: np.ndarray | None,
    qe: QuantizedBlockMatrix | None,
    full_factor: bool = False,
) -> PackedFactorPair:
    """Merge factor and error code grids into the shared square layout."""
    n = qf.rows
    pair = PackedFactorPair(
        order=n, block=qf.block_size, bits=qf.bits, kind=qf.kind,
        codes=np.zeros((n, n), dtype=np.uint8),
        diag=None if full_factor else np.asarray(diag, dtype=np.float64),
        factor_norms=None, full_factor=full_factor,
    )
    if qf.is_exempt:
        pair.factor_exempt = np.tril(qf.exempt_payload)
    else:
        pair.codes = np.tril(qf.codes).astype(np.uint8)
        pair.factor_norms = qf.norms
    if qe is not None:
        if qe.is_exempt:
            pair.error_exempt = np.tril(qe.exempt_payload, -1)
        else:
            pair.codes = pair.codes + np.triu(qe.codes.T, 1).astype(np.uint8)
            pair.error_norms = qe.norms
    return pair


@dataclass
class ShampooLayerState:
    """State machine for one preconditioned layer (or layer chunk)."""

    mode: str
    m: int
    n: int
    left: object  # np.ndarray | QuantizedSide | PackedFactorPair
    right: object
    root_left: object  # np.ndarray | QuantizedSide
    root_right: object
    step: int = 0


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------


def _quant_state(S: np.ndarray, cb: QuantCodebook, cfg) -> QuantizedSide:
    qbm, diag = quantize_offdiag(
        S, cb, block=cfg.block, exemption=_exemption(cfg),
        norm_scope=cfg.norm_scope,
    )
    return QuantizedSide(qbm, diag)


def _quant_factor(C: np.ndarray, cb: QuantCodebook, cfg) -> tuple[QuantizedBlockMatrix, np.ndarray | None]:
    if cfg.keep_factor_diag:
        qf, diag = quantize_offdiag(
            C, cb, block=cfg.block, exemption=_exemption(cfg),
            norm_scope=cfg.norm_scope,
        )
        return qf, diag
    qf = quantize_matrix(C, cb, block=cfg.block, exemption=_exemption(cfg))
    return qf, None


def init_state(m: int, n: int, mode: str, cfg) -> ShampooLayerState:
    """Fresh state: statistics at ``eps``-scaled identity, roots at identity."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if m < 1 or n < 1:
        raise ValueError(f"invalid preconditioner orders ({m}, {n})")
    cb = build_codebook(cfg.bits, cfg.codebook)
    eps = cfg.eps

    def roots():
        if mode == "full32":
            return np.eye(m), np.eye(n)
        return _quant_state(np.eye(m), cb, cfg), _quant_state(np.eye(n), cb, cfg)

    rl, rr = roots()
    if mode == "full32":
        left, right = eps * np.eye(m), eps * np.eye(n)
    elif mode == "vq4":
        left = _quant_state(eps * np.eye(m), cb, cfg)
        right = _quant_state(eps * np.eye(n), cb, cfg)
    else:
        root_eps = np.sqrt(eps)
        sides = []
        for order in (m, n):
            qf, diag = _quant_factor(root_eps * np.eye(order), cb, cfg)
            qe = None
            if mode == "cq4ef":
                qe = quantize_matrix(
                    np.zeros((order, order)), cb, block=cfg.block,
                    exemption=_exemption(cfg),
                )
            sides.append(pack_factor_pair(qf, diag, qe,
                                          full_factor=not cfg.keep_factor_diag))
        left, right = sides
    return ShampooLayerState(mode, m, n, left, right, rl, rr)


# ---------------------------------------------------------------------------
# Reconstruction helpers
# ---------------------------------------------------------------------------


def reconstruct_side(payload, cb: QuantCodebook) -> np.ndarray:
    """Dequantize one statistic payload back to a dense symmetric matrix."""
    if isinstance(payload, np.ndarray):
        return payload.copy()
    if isinstance(payload, QuantizedSide):
        return payload.dequantize(cb)
    C = payload.unpack_factor(cb)
    return _sym(C @ C.T)


def dequantize_root(root, cb: QuantCodebook) -> np.ndarray:
    if isinstance(root, np.ndarray):
        return root.copy()
    return root.dequantize(cb)


# ---------------------------------------------------------------------------
# Statistic updates
# ---------------------------------------------------------------------------


def update_state_full32(st: ShampooLayerState, G: np.ndarray, beta: float) -> None:
    st.left = beta * st.left + (1.0 - beta) * (G @ G.T)
    st.right = beta * st.right + (1.0 - beta) * (G.T @ G)


def update_state_vq(st: ShampooLayerState, G: np.ndarray, beta: float,
                    cb: QuantCodebook, cfg) -> None:
    for attr, S in (("left", G @ G.T), ("right", G.T @ G)):
        prev = getattr(st, attr).dequantize(cb)
        setattr(st, attr, _quant_state(beta * prev + (1.0 - beta) * S, cb, cfg))


def apply_error_feedback(
    C: np.ndarray,
    Ebar_prev: np.ndarray,
    cb: QuantCodebook,
    *,
    block: int = 64,
    exemption: int = 0,
    norm_scope: str = "full",
    keep_factor_diag: bool = True,
) -> tuple[QuantizedBlockMatrix, np.ndarray | None]:
    """Quantize the error-compensated factor ``C + D(Ē_prev)``.

    The error state is strictly lower triangular, so the compensated factor
    keeps C's diagonal bit-exactly in production mode.
    """
    comp = C + Ebar_prev
    if keep_factor_diag:
        return quantize_offdiag(comp, cb, block=block, exemption=exemption,
                                norm_scope=norm_scope)
    return quantize_matrix(comp, cb, block=block, exemption=exemption), None


def update_error_state(
    Ebar_prev: np.ndarray,
    C: np.ndarray,
    Cbar: np.ndarray,
    beta_e: float,
    cb: QuantCodebook,
    *,
    block: int = 64,
    exemption: int = 0,
) -> QuantizedBlockMatrix:
    """EMA of compensated-quantization residuals, re-quantized for storage.

    ``E = β_e·Ē_prev + (1−β_e)·(C + Ē_prev − C̄)`` restricted to the strict
    lower triangle (the diagonal residual is zero by construction whenever
    the factor diagonal is exempt). The stored error state gets its own
    per-block norms.
    """
    E = beta_e * Ebar_prev + (1.0 - beta_e) * (C + Ebar_prev - Cbar)
    E = np.tril(E, -1)
    return quantize_matrix(E, cb, block=block, exemption=exemption)


def update_state_cq(st: ShampooLayerState, G: np.ndarray, beta: float,
                    eps: float, cb: QuantCodebook, cfg) -> None:
    """EMA on the Gram reconstruction, refactor, requantize (optionally EF)."""
    beta_e = cfg.beta_e
    for attr, S in (("left", G @ G.T), ("right", G.T @ G)):
        pair: PackedFactorPair = getattr(st, attr)
        Cprev = pair.unpack_factor(cb)
        L = _sym(beta * (Cprev @ Cprev.T) + (1.0 - beta) * S)
        C, _ = linalg.cholesky_retry(L, eps)
        qe = None
        if st.mode == "cq4ef":
            Ebar = pair.unpack_error(cb)
            qf, diag = apply_error_feedback(
                C, Ebar, cb, block=cfg.block, exemption=_exemption(cfg),
                norm_scope=cfg.norm_scope, keep_factor_diag=cfg.keep_factor_diag,
            )
            Cbar = _dequant_factor(qf, diag, cb, cfg)
            qe = update_error_state(Ebar, C, Cbar, beta_e, cb,
                                    block=cfg.block, exemption=_exemption(cfg))
        else:
            qf, diag = _quant_factor(C, cb, cfg)
        setattr(st, attr, pack_factor_pair(qf, diag, qe,
                                           full_factor=not cfg.keep_factor_diag))


def _dequant_factor(qf: QuantizedBlockMatrix, diag, cb: QuantCodebook, cfg) -> np.ndarray:
    if diag is not None:
        return np.tril(dequantize_offdiag(qf, diag, cb))
    return np.tril(dequantize_matrix(qf, cb))


def update_state(st: ShampooLayerState, G: np.ndarray, cfg) -> None:
    """Mode dispatcher for the fast-interval statistic update."""
    cb = build_codebook(cfg.bits, cfg.codebook)
    if st.mode == "full32":
        update_state_full32(st, G, cfg.beta)
    elif st.mode == "vq4":
        update_state_vq(st, G, cfg.beta, cb, cfg)
    else:
        update_state_cq(st, G, cfg.beta, cfg.eps, cb, cfg)


# ---------------------------------------------------------------------------
# Root refresh
# ---------------------------------------------------------------------------


def refresh_roots(st: ShampooLayerState, eps: float, cb: QuantCodebook, cfg) -> None:
    """Recompute both inverse fourth roots from the current statistics.

    The spectral norm is re-estimated by power iteration at every refresh and
    sets the regularizer scale inside the root computation.
    """
    for attr, root_attr in (("left", "root_left"), ("right", "root_right")):
        A = reconstruct_side(getattr(st, attr), cb)
        lam = linalg.max_singular_value(A)
        X = linalg.inv_quarter_root(A, lam if lam > 0 else 1.0, eps)
        if st.mode == "full32":
            setattr(st, root_attr, X)
        else:
            setattr(st, root_attr, _quant_state(X, cb, cfg))


# ---------------------------------------------------------------------------
# Snapshot serialization
# ---------------------------------------------------------------------------

_MAGIC = b"QST1"
_PAYLOAD_FULL, _PAYLOAD_QSIDE, _PAYLOAD_PAIR = 0, 1, 2


def _write_array(out: list[bytes], X: np.ndarray | None) -> None:
    if X is None:
        out.append(struct.pack("<i", -1))
        return
    X = np.ascontiguousarray(X, dtype=np.float64)
    out.append(struct.pack("<i", X.ndim) + struct.pack(f"<{X.ndim}I", *X.shape))
    out.append(X.tobytes())


def _read_array(buf: bytes, off: int) -> tuple[np.ndarray | None, int]:
    (ndim,) = struct.unpack_from("<i", buf, off)
    off += 4
    if ndim < 0:
        return None, off
    shape = struct.unpack_from(f"<{ndim}I", buf, off)
    off += 4 * ndim
    count = int(np.prod(shape)) if ndim else 1
    X = np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(shape).copy()
    return X, off + 8 * count


def _write_qbm(out: list[bytes], q: QuantizedBlockMatrix) -> None:
    blob = serialize_qbm(q)
    out.append(struct.pack("<I", len(blob)))
    out.append(blob)


def _read_qbm(buf: bytes, off: int) -> tuple[QuantizedBlockMatrix, int]:
    (size,) = struct.unpack_from("<I", buf, off)
    off += 4
    return deserialize_qbm(buf[off:off + size]), off + size


def _write_payload(out: list[bytes], payload) -> None:
    if isinstance(payload, np.ndarray):
        out.append(struct.pack("<B", _PAYLOAD_FULL))
        _write_array(out, payload)
    elif isinstance(payload, QuantizedSide):
        out.append(struct.pack("<B", _PAYLOAD_QSIDE))
        _write_qbm(out, payload.qbm)
        _write_array(out, payload.diag)
    else:
        p: PackedFactorPair = payload
        out.append(struct.pack("<B", _PAYLOAD_PAIR))
        out.append(struct.pack("<IIBB?", p.order, p.block, p.bits,
                               len(p.kind), p.full_factor))
        out.append(p.kind.encode())
        out.append(p.codes.astype(np.uint8).tobytes())
        _write_array(out, p.diag)
        _write_array(out, p.factor_norms)
        _write_array(out, p.error_norms)
        _write_array(out, p.factor_exempt)
        _write_array(out, p.error_exempt)


def _read_payload(buf: bytes, off: int):
    (tag,) = struct.unpack_from("<B", buf, off)
    off += 1
    if tag == _PAYLOAD_FULL:
        return _read_array(buf, off)
    if tag == _PAYLOAD_QSIDE:
        qbm, off = _read_qbm(buf, off)
        diag, off = _read_array(buf, off)
        return QuantizedSide(qbm, diag), off
    order, block, bits, kind_len, full_factor = struct.unpack_from("<IIBB?", buf, off)
    off += struct.calcsize("<IIBB?")
    kind = buf[off:off + kind_len].decode()
    off += kind_len
    codes = np.frombuffer(buf, dtype=np.uint8, count=order * order,
                          offset=off).reshape(order, order).copy()
    off += order * order
    diag, off = _read_array(buf, off)
    factor_norms, off = _read_array(buf, off)
    error_norms, off = _read_array(buf, off)
    factor_exempt, off = _read_array(buf, off)
    error_exempt, off = _read_array(buf, off)
    pair = PackedFactorPair(order, block, bits, kind, codes, diag,
                            factor_norms, error_norms, factor_exempt,
                            error_exempt, full_factor)
    return pair, off


def save_state(st: ShampooLayerState) -> bytes:
    mode_id = MODES.index(st.mode)
    out = [_MAGIC, struct.pack("<BIIQ", mode_id, st.m, st.n, st.step)]
    for payload in (st.left, st.right, st.root_left, st.root_right):
        _write_payload(out, payload)
    return b"".join(out)


def load_state(buf: bytes) -> ShampooLayerState:
    if buf[:4] != _MAGIC:
        raise ValueError("not a state snapshot")
    mode_id, m, n, step = struct.unpack_from("<BIIQ", buf, 4)
    off = 4 + struct.calcsize("<BIIQ")
    payloads = []
    for _ in range(4):
        payload, off = _read_payload(buf, off)
        payloads.append(payload)
    left, right, root_left, root_right = payloads
    return ShampooLayerState(MODES[mode_id], m, n, left, right,
                             root_left, root_right, step)
