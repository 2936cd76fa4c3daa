"""Quantized Shampoo: 4-bit preconditioner states via Cholesky-factor
quantization with error feedback, plus 32-bit and vanilla-4-bit baselines.

Modules:
  quant    — block-wise low-bit quantization (linear / linear-2 codebooks)
  linalg   — Cholesky, inverse quarter-roots, power iteration, SPD synthesis
  state    — per-layer preconditioner state machines (4 storage modes)
  optim    — base optimizers + the preconditioned step
  metrics  — spectral-fidelity metrics and the memory accounting model
  problems — desk-scale objectives with exact gradient oracles
  cli      — the benchmark command-line harness
"""

from .backend import active_backend, available_backends, use_backend, warmup

__all__ = ["active_backend", "available_backends", "use_backend", "warmup"]
__version__ = "0.1.0"
