"""Harness tests: config round trips, subcommand behavior, exit codes,
artifact determinism, and CSV/JSON value parity."""

from __future__ import annotations

import csv
import io
import json

import numpy as np
import pytest

from qshampoo import cli
from qshampoo.metrics import memory_bytes
from qshampoo.optim import ShampooConfig
from qshampoo.state import init_state


def parse_csv(text):
    rows = [r for r in csv.reader(io.StringIO(text))
            if r and not r[0].startswith("#")]
    header, *data = rows
    return header, data


def run_main(args, capsys):
    code = cli.main(args)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


# -- config -------------------------------------------------------------------


def test_config_ini_round_trip():
    cfg = cli.ExperimentConfig(seed=7, mode="vq4", steps=42, cond=3.5,
                               lr=0.125)
    cfg.shampoo = ShampooConfig(mode="vq4", t1=3, t2=9, block=8, exemption=0)
    text = cli.config_to_ini(cfg)
    back = cli.config_from_ini(text)
    assert back == cfg
    assert cli.config_to_ini(back) == text


def test_config_bool_coercion():
    cfg = cli.config_from_ini("[run]\ntiming = yes\n\n[shampoo]\n"
                              "warm_start = off\n")
    assert cfg.timing is True
    assert cfg.shampoo.warm_start is False


@pytest.mark.parametrize("text", [
    "[extra]\nx = 1\n",
    "[run]\nstpes = 5\n",
    "[shampoo]\nblocksize = 4\n",
    "[base]\nlr = fast\n",
    "[run]\ntiming = maybe\n",
])
def test_config_rejects_bad_input(text):
    with pytest.raises((cli.ConfigError, ValueError)):
        cli.config_from_ini(text)


def test_config_mode_propagates_to_shampoo():
    cfg = cli.config_from_ini("[run]\nmode = cq4\n")
    assert cfg.shampoo.mode == "cq4"


# -- toy ----------------------------------------------------------------------


def test_toy_matrices_golden():
    mats = cli.toy_matrices()
    np.testing.assert_allclose(mats["vq"], [[10, 3.6], [3.6, 1.1111]],
                               atol=5e-3)
    np.testing.assert_allclose(mats["cq"], [[10, 3.6], [3.6, 1.4195]],
                               atol=5e-3)
    w = np.linalg.eigvalsh(mats["vq"])
    assert w[0] < 0.0  # vanilla quantization breaks PD on this matrix
    assert np.linalg.eigvalsh(mats["cq"])[0] > 0.0


def test_toy_exit_zero_and_rows(capsys):
    code, out, err = run_main(["toy"], capsys)
    assert code == 0
    assert err == ""
    header, data = parse_csv(out)
    assert [r[0] for r in data] == ["original", "vq", "cq"]
    eig_hi = {r[0]: float(r[1]) for r in data}
    assert eig_hi["cq"] == pytest.approx(11.310, abs=1e-2)


def test_toy_golden_miss_exits_one(capsys, monkeypatch):
    broken = dict(cli._TOY_GOLD)
    broken["cq"] = (broken["cq"][0], (99.0, 99.0))
    monkeypatch.setattr(cli, "_TOY_GOLD", broken)
    code, _, err = run_main(["toy"], capsys)
    assert code == 1
    assert "GOLDEN MISS" in err


# -- matstudy -----------------------------------------------------------------


def test_matstudy_rows_and_summary(capsys):
    code, out, err = run_main(
        ["matstudy", "--n-matrices", "4", "--order", "8"], capsys)
    assert code == 0
    header, data = parse_csv(out)
    assert header == ["pipeline", "matrix", "nre", "ae"]
    assert len(data) == 2 * (4 + 2)  # per-matrix + sum + mean, two pipelines
    vq = [r for r in data if r[0] == "vq"]
    per = [float(r[2]) for r in vq if r[1] not in ("sum", "mean")]
    total = float([r for r in vq if r[1] == "sum"][0][2])
    mean = float([r for r in vq if r[1] == "mean"][0][2])
    assert total == pytest.approx(sum(per))
    assert mean == pytest.approx(total / 4)
    assert "cumulative NRE" in err


def test_matstudy_exact_mode_vq_is_lossless(capsys):
    code, out, _ = run_main(
        ["matstudy", "--n-matrices", "2", "--order", "8", "--exact"], capsys)
    assert code == 0
    _, data = parse_csv(out)
    vq_nre = [float(r[2]) for r in data if r[0] == "vq" and r[1] == "sum"]
    assert vq_nre == [0.0]


def test_matstudy_small_order_is_usage_error(capsys):
    code, _, err = run_main(["matstudy", "--order", "2"], capsys)
    assert code == 2
    assert "order" in err


# -- train --------------------------------------------------------------------


def test_train_rows_and_columns(capsys):
    code, out, err = run_main(["train", "--steps", "30"], capsys)
    assert code == 0, err
    header, data = parse_csv(out)
    assert header == ["step", "loss", "grad_norm", "min_eig_left",
                      "min_eig_right", "wall_ms", "state_bytes"]
    steps = [int(r[0]) for r in data]
    assert steps[-1] == 30
    assert 1 in steps  # warm-start refresh is logged
    losses = [float(r[1]) for r in data]
    assert losses[-1] < losses[0]
    assert all(float(r[5]) == 0.0 for r in data)  # no --timing
    assert all(int(r[6]) > 0 for r in data)


def test_train_timing_flag_populates_wall_ms(capsys):
    code, out, _ = run_main(["train", "--steps", "20", "--timing"], capsys)
    assert code == 0
    _, data = parse_csv(out)
    assert float(data[-1][5]) > 0.0


def test_train_reruns_byte_identical(tmp_path, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    run_main(["train", "--steps", "40", "--out", str(a)], capsys)
    run_main(["train", "--steps", "40", "--out", str(b)], capsys)
    assert a.read_bytes() == b.read_bytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # divergence is the point
def test_train_divergence_exits_one(tmp_path, capsys):
    ini = tmp_path / "explode.ini"
    ini.write_text("[run]\nmode = full32\nsteps = 200\nlog_every = 5\n"
                   "\n[base]\nlr = 50.0\n")
    code, out, err = run_main(["train", "--config", str(ini)], capsys)
    assert code == 1
    assert "ABORT" in err
    _, data = parse_csv(out)
    assert len(data) >= 1  # partial trajectory still written


def test_train_batched_problem(capsys):
    code, out, err = run_main(
        ["train", "--problem", "logistic", "--steps", "20"], capsys)
    assert code == 0, err
    _, data = parse_csv(out)
    assert len(data) >= 2


def test_train_csv_json_value_parity(capsys):
    _, out_c, _ = run_main(["train", "--steps", "20"], capsys)
    _, out_j, _ = run_main(["train", "--steps", "20", "--format", "json"],
                           capsys)
    header, data = parse_csv(out_c)
    doc = json.loads(out_j)
    assert doc["schema"] == "qshampoo.train.v1"
    assert doc["config"]["run.steps"] == "20"
    assert len(doc["rows"]) == len(data)
    for row_c, row_j in zip(data, doc["rows"]):
        for key, cell in zip(header, row_c):
            value = row_j[key]
            expect = repr(value) if isinstance(value, float) else str(value)
            assert cell == expect


# -- memreport ----------------------------------------------------------------


def test_memreport_matches_metrics(capsys):
    code, out, _ = run_main(["memreport", "--orders", "16,32"], capsys)
    assert code == 0
    header, data = parse_csv(out)
    cfg = cli.ExperimentConfig()
    for row in data:
        order, mode = int(row[0]), row[1]
        led = memory_bytes(init_state(order, order, mode, cfg.shampoo))
        assert [int(v) for v in row[2:]] == [led.codes, led.norms,
                                             led.diagonals, led.full,
                                             led.total]


def test_memreport_mode_filter(capsys):
    code, out, _ = run_main(
        ["memreport", "--orders", "16", "--mode", "cq4"], capsys)
    assert code == 0
    _, data = parse_csv(out)
    assert [r[1] for r in data] == ["cq4"]


def test_memreport_bad_orders_usage_error(capsys):
    code, _, err = run_main(["memreport", "--orders", "64,big"], capsys)
    assert code == 2
    assert "orders" in err


# -- plumbing -----------------------------------------------------------------


def test_missing_config_file_is_usage_error(capsys):
    code, _, err = run_main(["train", "--config", "/no/such/file.ini"], capsys)
    assert code == 2
    assert "error:" in err


def test_config_file_drives_run(tmp_path, capsys):
    ini = tmp_path / "run.ini"
    ini.write_text("[run]\nsteps = 12\nlog_every = 6\nmode = vq4\n")
    code, out, _ = run_main(["train", "--config", str(ini)], capsys)
    assert code == 0
    _, data = parse_csv(out)
    assert int(data[-1][0]) == 12
    assert "# config: run.mode=vq4" in out


def test_flag_overrides_config(tmp_path, capsys):
    ini = tmp_path / "run.ini"
    ini.write_text("[run]\nsteps = 12\n")
    code, out, _ = run_main(
        ["train", "--config", str(ini), "--steps", "8"], capsys)
    assert code == 0
    _, data = parse_csv(out)
    assert int(data[-1][0]) == 8


def test_schema_comment_first_line(capsys):
    _, out, _ = run_main(["toy"], capsys)
    assert out.splitlines()[0] == "# schema: qshampoo.toy.v1"
