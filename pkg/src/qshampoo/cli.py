"""Benchmark harness: toy golden gate, fidelity study, training runs, and the
memory report, with deterministic CSV/JSON artifacts.

Every command is deterministic given (config, seed): float cells are written
with ``repr`` (shortest round-trip), wall-clock columns stay 0.0 unless
``--timing`` is passed, and the full effective config is echoed into every
output file. CSV and JSON carry the same schema tag and the same values.

The config file is flat INI with three sections::

    [run]       command parameters (problem, sizes, steps, output format...)
    [shampoo]   preconditioner settings (large-scale defaults live in
                ShampooConfig; the harness ships desk-scale defaults,
                see DESK_SHAMPOO)
    [base]      base-optimizer hyperparameters

Unknown sections or keys are rejected so a typo cannot silently fall back to
a default.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import io
import json
import sys
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import problems as problems_mod
from .linalg import FactorizationError, cholesky, synth_spd
from .metrics import memory_bytes, min_eigenvalue, nre_ae
from .optim import (
    BaseOptimizerState,
    ShampooConfig,
    init_plans,
    shampoo_step,
)
from .quant import build_codebook, dequantize_matrix, quantize_matrix
from .state import MODES, _EXEMPT_ALL, dequantize_root

SCHEMA_VERSION = "v1"

# Desk-scale harness defaults: small statistics need small blocks and fast
# intervals, and nothing at this scale should be exempt from quantization.
# Library defaults (ShampooConfig) stay at the large-scale settings.
DESK_SHAMPOO = dict(t1=10, t2=50, block=4, exemption=0)


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    """Harness configuration (the [run] and [base] sections + ShampooConfig)."""

    # [run]
    seed: int = 0
    format: str = "csv"
    mode: str = "cq4ef"
    timing: bool = False
    log_every: int = 10
    steps: int = 500
    problem: str = "quadratic"
    optimizer: str = "sgdm"
    batch_size: int = 0
    m: int = 16
    n: int = 16
    cond: float = 10.0
    dim: int = 10
    hidden: int = 16
    d_out: int = 4
    n_samples: int = 64
    activation: str = "relu"
    n_matrices: int = 100
    order: int = 64
    lam_lo: float = 1e-3
    lam_hi: float = 1e3
    orders: str = "64,256,1024"
    # [shampoo] / [base]
    shampoo: ShampooConfig = field(
        default_factory=lambda: ShampooConfig(**DESK_SHAMPOO))
    lr: float = 0.05
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    rho: float = 0.99
    weight_decay: float = 0.0
    c: float = 1e-8


_RUN_FIELDS = [f for f in fields(ExperimentConfig)
               if f.name not in ("shampoo", "lr", "momentum", "beta1", "beta2",
                                 "rho", "weight_decay", "c")]
_BASE_FIELDS = [f for f in fields(ExperimentConfig)
                if f.name in ("lr", "momentum", "beta1", "beta2", "rho",
                              "weight_decay", "c")]
_SHAMPOO_FIELDS = [f for f in fields(ShampooConfig) if f.name != "mode"]


class ConfigError(ValueError):
    """Bad config file or flag combination (a usage error, exit code 2)."""


def _coerce(raw: str, typ):
    if typ is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    return typ(raw)


def config_to_ini(cfg: ExperimentConfig) -> str:
    """Serialize to the flat INI layout (stable key order)."""
    out = io.StringIO()
    out.write("[run]\n")
    for f in _RUN_FIELDS:
        out.write(f"{f.name} = {getattr(cfg, f.name)}\n")
    out.write("\n[shampoo]\n")
    for f in _SHAMPOO_FIELDS:
        out.write(f"{f.name} = {getattr(cfg.shampoo, f.name)}\n")
    out.write("\n[base]\n")
    for f in _BASE_FIELDS:
        out.write(f"{f.name} = {getattr(cfg, f.name)}\n")
    return out.getvalue()


def config_from_ini(text: str) -> ExperimentConfig:
    """Parse the INI layout; unknown sections or keys raise ConfigError."""
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    known = {"run": {f.name: f.type for f in _RUN_FIELDS},
             "shampoo": {f.name: f.type for f in _SHAMPOO_FIELDS},
             "base": {f.name: f.type for f in _BASE_FIELDS}}
    for section in parser.sections():
        if section not in known:
            raise ConfigError(f"unknown config section [{section}]")
    cfg = ExperimentConfig()
    sh_kwargs = {f.name: getattr(cfg.shampoo, f.name) for f in _SHAMPOO_FIELDS}
    for section, types in known.items():
        if not parser.has_section(section):
            continue
        for key, raw in parser.items(section):
            if key not in types:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            typ = types[key]
            if isinstance(typ, str):  # dataclass stores stringified annotations
                typ = {"int": int, "float": float, "str": str, "bool": bool}[typ]
            value = _coerce(raw, typ)
            if section == "shampoo":
                sh_kwargs[key] = value
            else:
                setattr(cfg, key, value)
    cfg.shampoo = ShampooConfig(mode=cfg.mode, **sh_kwargs)
    return cfg


def _flat_config(cfg: ExperimentConfig) -> list[tuple[str, str]]:
    """(section.key, value-string) pairs, stable order, for output echoing."""
    pairs = [(f"run.{f.name}", str(getattr(cfg, f.name))) for f in _RUN_FIELDS]
    pairs += [(f"shampoo.{f.name}", str(getattr(cfg.shampoo, f.name)))
              for f in _SHAMPOO_FIELDS]
    pairs += [(f"base.{f.name}", str(getattr(cfg, f.name)))
              for f in _BASE_FIELDS]
    return pairs


# ---------------------------------------------------------------------------
# Output writers
# ---------------------------------------------------------------------------


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_rows(path: str | None, fmt: str, schema: str, cfg: ExperimentConfig,
               header: list[str], rows: list[list]) -> str:
    """Render rows as CSV or JSON; write to ``path`` when given.

    Returns the rendered text either way so commands can also print it.
    """
    tag = f"qshampoo.{schema}.{SCHEMA_VERSION}"
    if fmt == "csv":
        out = io.StringIO()
        out.write(f"# schema: {tag}\n")
        for key, value in _flat_config(cfg):
            out.write(f"# config: {key}={value}\n")
        out.write(",".join(header) + "\n")
        for row in rows:
            out.write(",".join(_cell(v) for v in row) + "\n")
        text = out.getvalue()
    elif fmt == "json":
        doc = {
            "schema": tag,
            "config": dict(_flat_config(cfg)),
            "rows": [dict(zip(header, row)) for row in rows],
        }
        text = json.dumps(doc, indent=2) + "\n"
    else:
        raise ConfigError(f"unknown output format {fmt!r}")
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    return text


# ---------------------------------------------------------------------------
# toy
# ---------------------------------------------------------------------------

# 2x2 study golden values: statistic, its vanilla-quantized reconstruction,
# and the Gram of its quantized Cholesky factor, with their eigenvalues.
_TOY_L = np.array([[10.0, 3.0], [3.0, 1.0]])
_TOY_GOLD = {
    "original": (np.array([[10.0, 3.0], [3.0, 1.0]]), (10.908, 0.092)),
    "vq": (np.array([[10.0, 3.6], [3.6, 1.11]]), (11.275, -0.164)),
    "cq": (np.array([[10.0, 3.6], [3.6, 1.42]]), (11.310, 0.109)),
}
_TOY_EIG_TOL = 1e-2
_TOY_ENTRY_TOL = 5e-3


def toy_matrices() -> dict[str, np.ndarray]:
    """The 2x2 study: vanilla vs full-factor Cholesky quantization at 4 bits."""
    cb = build_codebook(4, "linear2")
    vq = dequantize_matrix(quantize_matrix(_TOY_L, cb, block=64), cb)
    C = cholesky(_TOY_L)
    Cbar = np.tril(dequantize_matrix(quantize_matrix(C, cb, block=64), cb))
    return {"original": _TOY_L, "vq": vq, "cq": Cbar @ Cbar.T}


def cmd_toy(cfg: ExperimentConfig, out: str | None) -> int:
    mats = toy_matrices()
    header = ["matrix", "eig_hi", "eig_lo", "m00", "m01", "m10", "m11"]
    rows, failures = [], []
    for name, M in mats.items():
        w = np.linalg.eigvalsh(M)
        rows.append([name, float(w[1]), float(w[0]),
                     float(M[0, 0]), float(M[0, 1]),
                     float(M[1, 0]), float(M[1, 1])])
        gold_M, gold_eig = _TOY_GOLD[name]
        if abs(w[1] - gold_eig[0]) > _TOY_EIG_TOL or \
           abs(w[0] - gold_eig[1]) > _TOY_EIG_TOL:
            failures.append(
                f"{name}: eigenvalues ({w[1]:.3f}, {w[0]:.3f}) "
                f"miss golden {gold_eig}")
        if name != "original" and np.max(np.abs(M - gold_M)) > _TOY_ENTRY_TOL:
            failures.append(
                f"{name}: reconstruction off by "
                f"{np.max(np.abs(M - gold_M)):.4f} > {_TOY_ENTRY_TOL}")
    text = write_rows(out, cfg.format, "toy", cfg, header, rows)
    sys.stdout.write(text)
    for msg in failures:
        print(f"GOLDEN MISS {msg}", file=sys.stderr)
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# matstudy
# ---------------------------------------------------------------------------


def cmd_matstudy(cfg: ExperimentConfig, out: str | None) -> int:
    if cfg.order < 4:
        raise ConfigError(f"matstudy order must be >= 4, got {cfg.order}")
    sh = cfg.shampoo
    cb = sh.cb
    exemption = _EXEMPT_ALL if sh.exact else sh.exemption
    mats = [synth_spd(cfg.order, cfg.lam_lo, cfg.lam_hi,
                      seed=cfg.seed * cfg.n_matrices + i)
            for i in range(cfg.n_matrices)]
    header = ["pipeline", "matrix", "nre", "ae"]
    rows = []
    summary = {}
    for pipeline in ("vq", "cq"):
        rep = nre_ae(mats, pipeline, cb, block=sh.block, exemption=exemption,
                     norm_scope=sh.norm_scope)
        for e in rep.entries:
            rows.append([pipeline, e.index, e.nre, e.ae])
        rows.append([pipeline, "sum", rep.nre, rep.ae])
        rows.append([pipeline, "mean", rep.nre_mean, rep.ae_mean])
        summary[pipeline] = rep
    text = write_rows(out, cfg.format, "matstudy", cfg, header, rows)
    sys.stdout.write(text)
    vq, cq = summary["vq"], summary["cq"]
    print(f"# cumulative NRE vq={vq.nre!r} cq={cq.nre!r}  "
          f"AE vq={vq.ae!r} cq={cq.ae!r}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


@dataclass
class TrainRecord:
    """One logged point of a training run."""

    step: int
    loss: float
    grad_norm: float
    min_eig_left: float
    min_eig_right: float
    wall_ms: float
    state_bytes: int

    def row(self) -> list:
        return [self.step, self.loss, self.grad_norm, self.min_eig_left,
                self.min_eig_right, self.wall_ms, self.state_bytes]


_TRAIN_HEADER = ["step", "loss", "grad_norm", "min_eig_left",
                 "min_eig_right", "wall_ms", "state_bytes"]


def _build_problem(cfg: ExperimentConfig):
    if cfg.problem == "quadratic":
        return problems_mod.quadratic_problem(cfg.m, cfg.n, cfg.cond,
                                              seed=cfg.seed)
    if cfg.problem == "logistic":
        return problems_mod.logistic_problem(cfg.dim, cfg.n_samples,
                                             seed=cfg.seed)
    if cfg.problem == "mlp":
        return problems_mod.mlp_problem(cfg.dim, cfg.hidden, cfg.d_out,
                                        cfg.n_samples, cfg.activation,
                                        seed=cfg.seed)
    raise ConfigError(f"unknown problem {cfg.problem!r}")


def _base_state(cfg: ExperimentConfig) -> BaseOptimizerState:
    return BaseOptimizerState(
        cfg.optimizer, lr=cfg.lr, momentum=cfg.momentum, beta1=cfg.beta1,
        beta2=cfg.beta2, rho=cfg.rho, c=cfg.c, weight_decay=cfg.weight_decay,
    )


def run_training(cfg: ExperimentConfig):
    """Run one training loop; returns (records, diagnostic-or-None).

    A non-finite loss or a factorization failure stops the run; the records
    logged so far are kept so the artifact still shows the trajectory.
    """
    sh = cfg.shampoo
    prob = _build_problem(cfg)
    params = prob.init()
    plans = init_plans(params, sh)
    base = _base_state(cfg)
    batches = (prob.batches(cfg.batch_size, cfg.seed)
               if cfg.batch_size > 0 else None)
    states = [st for plan in plans if not plan.bypass for st in plan.states]

    def roots_min_eig() -> tuple[float, float]:
        if not states:
            return 1.0, 1.0
        cb = sh.cb
        lo_l = min(min_eigenvalue(dequantize_root(st.root_left, cb))
                   for st in states)
        lo_r = min(min_eigenvalue(dequantize_root(st.root_right, cb))
                   for st in states)
        return lo_l, lo_r

    def state_bytes() -> int:
        return sum(memory_bytes(st).total for st in states)

    records: list[TrainRecord] = []
    # identity roots until the first refresh
    eig_l, eig_r = 1.0, 1.0
    t_start = time.perf_counter()
    for k in range(1, cfg.steps + 1):
        batch = next(batches) if batches is not None else None
        g = prob.grad(params, batch) if batch is not None else prob.grad(params)
        try:
            shampoo_step(params, g, plans, base, sh, k)
        except FactorizationError as exc:
            return records, f"factorization failed at step {k}: {exc}"
        refreshed = (sh.warm_start and k == 1) or k % sh.t2 == 0
        if refreshed:
            eig_l, eig_r = roots_min_eig()
        if k % cfg.log_every == 0 or refreshed or k == cfg.steps:
            loss = prob.loss(params, batch) if batch is not None \
                else prob.loss(params)
            gn = float(np.sqrt(sum(float(np.sum(x * x)) for x in g)))
            wall = (time.perf_counter() - t_start) * 1e3 if cfg.timing else 0.0
            records.append(TrainRecord(k, float(loss), gn, eig_l, eig_r,
                                       wall, state_bytes()))
            if not np.isfinite(loss):
                return records, f"loss diverged at step {k}: {loss!r}"
    return records, None


def cmd_train(cfg: ExperimentConfig, out: str | None) -> int:
    records, diagnostic = run_training(cfg)
    rows = [r.row() for r in records]
    text = write_rows(out, cfg.format, "train", cfg, _TRAIN_HEADER, rows)
    sys.stdout.write(text)
    if diagnostic is not None:
        print(f"ABORT {diagnostic}", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# memreport
# ---------------------------------------------------------------------------


def cmd_memreport(cfg: ExperimentConfig, out: str | None,
                  only_mode: str | None = None) -> int:
    from .state import init_state

    try:
        orders = [int(tok) for tok in cfg.orders.split(",") if tok.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad orders list {cfg.orders!r}") from exc
    if not orders:
        raise ConfigError("orders list is empty")
    modes = [only_mode] if only_mode else list(MODES)
    header = ["order", "mode", "codes", "norms", "diagonals", "full", "total"]
    rows = []
    totals: dict[tuple[int, str], int] = {}
    for order in orders:
        for mode in modes:
            led = memory_bytes(init_state(order, order, mode, cfg.shampoo))
            rows.append([order, mode, led.codes, led.norms, led.diagonals,
                         led.full, led.total])
            totals[(order, mode)] = led.total
    text = write_rows(out, cfg.format, "memreport", cfg, header, rows)
    sys.stdout.write(text)
    if not only_mode:
        for order in orders:
            ratio = totals[(order, "cq4")] / totals[(order, "vq4")]
            print(f"# order {order}: cq4/vq4 = {ratio!r}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file")
    p.add_argument("--seed", type=int, help="run seed")
    p.add_argument("--out", help="output file path")
    p.add_argument("--format", choices=("csv", "json"), help="output format")
    p.add_argument("--mode", choices=MODES, help="preconditioner state mode")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qshampoo",
        description="Quantized-Shampoo benchmark harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("toy", help="2x2 quantization study golden gate")
    _add_common(p)

    p = sub.add_parser("matstudy", help="NRE/AE fidelity study")
    _add_common(p)
    p.add_argument("--n-matrices", type=int, dest="n_matrices")
    p.add_argument("--order", type=int)
    p.add_argument("--exact", action="store_true", default=None,
                   help="route quantization through the identity")

    p = sub.add_parser("train", help="optimizer comparison run")
    _add_common(p)
    p.add_argument("--problem", choices=("quadratic", "logistic", "mlp"))
    p.add_argument("--optimizer", choices=("sgdm", "adamw", "rmsprop"))
    p.add_argument("--steps", type=int)
    p.add_argument("--timing", action="store_true", default=None,
                   help="record wall-clock (breaks byte-identical reruns)")

    p = sub.add_parser("memreport", help="logical memory ledger")
    _add_common(p)
    p.add_argument("--orders", help="comma-separated list of orders")
    return parser


def _apply_overrides(cfg: ExperimentConfig, args: argparse.Namespace) -> None:
    for name in ("seed", "format", "mode", "timing", "problem", "optimizer",
                 "steps", "n_matrices", "order", "orders"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    sh_kwargs = {f.name: getattr(cfg.shampoo, f.name) for f in _SHAMPOO_FIELDS}
    if getattr(args, "exact", None):
        sh_kwargs["exact"] = True
    cfg.shampoo = ShampooConfig(mode=cfg.mode, **sh_kwargs)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.config:
            with open(args.config, encoding="utf-8") as fh:
                cfg = config_from_ini(fh.read())
        else:
            cfg = ExperimentConfig()
        _apply_overrides(cfg, args)
        if args.command == "toy":
            return cmd_toy(cfg, args.out)
        if args.command == "matstudy":
            return cmd_matstudy(cfg, args.out)
        if args.command == "train":
            return cmd_train(cfg, args.out)
        if args.command == "memreport":
            return cmd_memreport(cfg, args.out,
                                 only_mode=getattr(args, "mode", None))
    except (ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
