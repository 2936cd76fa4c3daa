"""Spectral-fidelity metrics (NRE/AE), eigenvalue checks, and the logical
memory model for preconditioner state.

NRE and AE compare the inverse fourth root of a matrix with the inverse
fourth root of its quantize-dequantize reconstruction::

    NRE = ||A^(-1/4) - g(A)^(-1/4)||_F / ||A^(-1/4)||_F
    AE  = arccos( <A^(-1/4), g(A)^(-1/4)>_F / (||.||_F ||.||_F) )  [degrees]

Both roots come from the same eigendecomposition oracle. ``g`` is one of the
reconstruction pipelines below. The reconstruction's eigenvalues are clamped
at a floor *relative to its own largest eigenvalue* before taking the root:
an indefinite reconstruction (the vanilla-quantization failure mode) then
shows up as a large error instead of being masked. Regularizing with a
training-style ``lambda_max * eps`` shift would pin negative directions to
roughly the oracle's own smallest eigenvalue and hide exactly the loss these
metrics exist to measure.

Memory accounting is a logical model, not allocator truth: codes cost
``bits/8`` bytes each, norms and diagonals 4 bytes each, full-precision
payloads 4 bytes per stored entry — regardless of the float64 arithmetic
used in memory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .quant import (
    QuantCodebook,
    QuantizedBlockMatrix,
    dequantize_matrix,
    dequantize_offdiag,
    quantize_matrix,
    quantize_offdiag,
)
from .state import PackedFactorPair, QuantizedSide, ShampooLayerState

PIPELINES = ("identity", "vq", "cq")


# ---------------------------------------------------------------------------
# NRE / AE
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MatrixFidelity:
    """Per-matrix breakdown row of a fidelity study."""

    index: int
    nre: float
    ae: float


@dataclass
class FidelityReport:
    """Cumulative (summed) and mean NRE/AE over a batch of matrices."""

    pipeline: str
    nre: float
    ae: float
    nre_mean: float
    ae_mean: float
    entries: list[MatrixFidelity] = field(default_factory=list)


def _sym(X: np.ndarray) -> np.ndarray:
    return (X + X.T) / 2.0


def _inv_quarter_root_oracle(A: np.ndarray, rel_floor: float) -> np.ndarray:
    """Eigendecomposition inverse fourth root with a relative eigenvalue floor.

    ``rel_floor = 0`` demands strict positive definiteness and raises
    otherwise; a positive floor clamps at ``rel_floor * lambda_max`` so the
    root of a damaged reconstruction stays finite but large.
    """
    w, V = np.linalg.eigh(_sym(A))
    if rel_floor == 0.0:
        if w[0] <= 0.0:
            raise ValueError(
                f"matrix is not positive definite (min eigenvalue {w[0]:.3e})"
            )
    else:
        floor = w[-1] * rel_floor
        if floor <= 0.0:
            floor = np.finfo(np.float64).tiny
        w = np.maximum(w, floor)
    return (V * w ** -0.25) @ V.T


def reconstruct(
    A: np.ndarray,
    pipeline: str,
    cb: QuantCodebook,
    *,
    block: int = 4,
    exemption: int = 0,
    norm_scope: str = "full",
) -> np.ndarray:
    """Apply one quantize-dequantize pipeline ``g`` to an SPD matrix.

    ``identity`` returns a copy; ``vq`` quantizes the whole matrix (diagonal
    included) and symmetrizes; ``cq`` quantizes the Cholesky factor with a
    full-precision diagonal and returns the Gram reconstruction, which is
    PSD by construction.
    """
    if pipeline == "identity":
        return A.copy()
    if pipeline == "vq":
        q = quantize_matrix(A, cb, block=block, exemption=exemption)
        return _sym(dequantize_matrix(q, cb))
    if pipeline == "cq":
        C = linalg.cholesky(A)
        qf, diag = quantize_offdiag(
            C, cb, block=block, exemption=exemption, norm_scope=norm_scope
        )
        Cbar = np.tril(dequantize_offdiag(qf, diag, cb))
        return _sym(Cbar @ Cbar.T)
    raise ValueError(f"unknown pipeline {pipeline!r}, expected one of {PIPELINES}")


def nre_ae(
    A,
    pipeline: str,
    cb: QuantCodebook,
    cfg=None,
    *,
    block: int | None = None,
    exemption: int | None = None,
    norm_scope: str | None = None,
    rel_floor: float = 1e-12,
) -> FidelityReport:
    """Fidelity of a quantization pipeline on one SPD matrix or a batch.

    ``A`` may be a single array or a sequence; the report always carries a
    per-matrix breakdown plus the cumulative sum and the mean. Quantization
    geometry comes from ``cfg`` when given (``block``/``exemption``/
    ``norm_scope`` attributes), explicit keywords win over both.

    Raises ``ValueError`` when an input matrix is not positive definite.
    """
    if block is None:
        block = getattr(cfg, "block", 4) if cfg is not None else 4
    if exemption is None:
        exemption = getattr(cfg, "exemption", 0) if cfg is not None else 0
    if norm_scope is None:
        norm_scope = getattr(cfg, "norm_scope", "full") if cfg is not None else "full"

    mats = [A] if isinstance(A, np.ndarray) and A.ndim == 2 else list(A)
    entries = []
    for i, M in enumerate(mats):
        ref = _inv_quarter_root_oracle(M, rel_floor=0.0)
        g = reconstruct(M, pipeline, cb, block=block, exemption=exemption,
                        norm_scope=norm_scope)
        rec = _inv_quarter_root_oracle(g, rel_floor=rel_floor)
        ref_norm = np.linalg.norm(ref)
        rec_norm = np.linalg.norm(rec)
        nre = float(np.linalg.norm(ref - rec) / ref_norm)
        cos = float(np.sum(ref * rec) / (ref_norm * rec_norm))
        ae = float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))
        entries.append(MatrixFidelity(i, nre, ae))
    n = len(entries)
    nre_sum = sum(e.nre for e in entries)
    ae_sum = sum(e.ae for e in entries)
    return FidelityReport(pipeline, nre_sum, ae_sum, nre_sum / n, ae_sum / n,
                          entries)


def min_eigenvalue(X: np.ndarray) -> float:
    """Smallest eigenvalue of a symmetric matrix (eigendecomposition oracle)."""
    return float(np.linalg.eigvalsh(X)[0])


# ---------------------------------------------------------------------------
# Memory model
# ---------------------------------------------------------------------------


@dataclass
class MemoryLedger:
    """Logical byte counts for one layer state, split by storage kind."""

    mode: str
    codes: int = 0
    norms: int = 0
    diagonals: int = 0
    full: int = 0

    @property
    def total(self) -> int:
        return self.codes + self.norms + self.diagonals + self.full

    def add(self, codes: int = 0, norms: int = 0, diagonals: int = 0,
            full: int = 0) -> None:
        self.codes += codes
        self.norms += norms
        self.diagonals += diagonals
        self.full += full


_FP_BYTES = 4  # logical cost of one norm / diagonal / full-precision entry


def _code_bytes(count: int, bits: int) -> int:
    return math.ceil(count * bits / 8)


def _count_qbm(led: MemoryLedger, q: QuantizedBlockMatrix,
               code_count: int | None = None) -> None:
    if q.is_exempt:
        led.add(full=_FP_BYTES * q.exempt_payload.size)
        return
    codes = q.codes.size if code_count is None else code_count
    led.add(codes=_code_bytes(codes, q.bits), norms=_FP_BYTES * q.norms.size)


def _count_side(led: MemoryLedger, side: QuantizedSide) -> None:
    _count_qbm(led, side.qbm)
    led.add(diagonals=_FP_BYTES * side.diag.size)


def _count_pair(led: MemoryLedger, pair: PackedFactorPair) -> None:
    n = pair.order
    if pair.factor_exempt is not None:
        led.add(full=_FP_BYTES * pair.factor_exempt.size)
    else:
        # the error state shares the square grid (vanilla parity); a plain
        # factor packs only its strict lower triangle, or the full triangle
        # when the diagonal is quantized along with it
        if pair.has_error:
            count = n * n
        elif pair.full_factor:
            count = n * (n + 1) // 2
        else:
            count = n * (n - 1) // 2
        led.add(codes=_code_bytes(count, pair.bits),
                norms=_FP_BYTES * pair.factor_norms.size)
    if pair.error_norms is not None:
        led.add(norms=_FP_BYTES * pair.error_norms.size)
    if pair.error_exempt is not None:
        led.add(full=_FP_BYTES * pair.error_exempt.size)
    if pair.diag is not None:
        led.add(diagonals=_FP_BYTES * pair.diag.size)


def memory_bytes(st: ShampooLayerState) -> MemoryLedger:
    """Logical byte ledger for one layer state (statistics + root caches)."""
    led = MemoryLedger(st.mode)
    for payload in (st.left, st.right, st.root_left, st.root_right):
        if isinstance(payload, np.ndarray):
            led.add(full=_FP_BYTES * payload.size)
        elif isinstance(payload, QuantizedSide):
            _count_side(led, payload)
        elif isinstance(payload, PackedFactorPair):
            _count_pair(led, payload)
        else:  # pragma: no cover - state invariant
            raise TypeError(f"unknown payload type {type(payload)!r}")
    return led
