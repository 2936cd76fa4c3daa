"""Kernel backend selection.

The block-quantization kernels exist in two interchangeable implementations:
a numba-jitted one (``_kernels_numba``) and a pure-numpy twin
(``_kernels_numpy``). Both produce bit-identical results; the numba path is
just faster on large matrices.

Selection order:
  1. ``QSHAMPOO_BACKEND`` environment variable (``numba`` or ``numpy``),
     read once at import time. Requesting ``numba`` when numba is not
     importable is an error.
  2. Default: numba if importable, else numpy.

``use_backend`` switches at runtime (used by the consistency tests and the
benchmark harness).
"""

from __future__ import annotations

import os

from . import _kernels_numpy

_IMPLS = {"numpy": _kernels_numpy}

try:
    from . import _kernels_numba

    _IMPLS["numba"] = _kernels_numba
    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba installed
    _HAVE_NUMBA = False


def _initial_backend() -> str:
    req = os.environ.get("QSHAMPOO_BACKEND", "").strip().lower()
    if req:
        if req not in ("numba", "numpy"):
            raise ValueError(
                f"QSHAMPOO_BACKEND must be 'numba' or 'numpy', got {req!r}"
            )
        if req == "numba" and not _HAVE_NUMBA:
            raise ImportError("QSHAMPOO_BACKEND=numba but numba is not installed")
        return req
    return "numba" if _HAVE_NUMBA else "numpy"


_ACTIVE = _initial_backend()


def active_backend() -> str:
    """Name of the kernel implementation currently in use."""
    return _ACTIVE


def available_backends() -> tuple[str, ...]:
    return tuple(sorted(_IMPLS))


def use_backend(name: str) -> str:
    """Switch kernel implementations; returns the previous backend name."""
    global _ACTIVE
    if name not in _IMPLS:
        raise ValueError(f"unknown backend {name!r}; have {sorted(_IMPLS)}")
    prev = _ACTIVE
    _ACTIVE = name
    return prev


def kernels():
    """The active kernel module (block_norms / assign_codes / reconstruct)."""
    return _IMPLS[_ACTIVE]


def warmup() -> None:
    """Force JIT compilation of the active backend on tiny inputs.

    No-op for the numpy backend. Call before wall-clock measurements.
    """
    import numpy as np

    k = kernels()
    x = np.array([[0.5, -0.25], [0.0, 1.0]])
    mids = np.array([-0.5, 0.0, 0.5])
    vals = np.array([-1.0, -0.25, 0.25, 1.0])
    norms = k.block_norms(x, 2)
    codes = k.assign_codes(x, norms, mids, 2, 1)
    k.reconstruct(codes, norms, vals, 2)
