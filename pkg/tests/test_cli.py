import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from cqdyn.cli import main, worker_count
from cqdyn.config import ConfigError, config_from_text
from cqdyn.hybrid_state import load_snapshot

OU_MODEL = """\
seed: 3
model:
  grid: {bounds: [[-8, 8]], points: 128}
  n_q: 1
  lindblads: []
  D0: []
  D1: [[]]
  drift: {matrix: [[-0.5]]}
  D2: [[0.5]]
  initial: {center: [0.0], width: 0.5}
run: {duration: 0.5, snapshot_stride: 10}
"""


def write(tmp_path, text, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


@pytest.mark.parametrize("scenario, code", [("oscillator-pair", 0), ("oscillator-pair-boundary", 3),
                                            ("oscillator-pair-violating", 2), ("two-site-jump-detuned", 2),
                                            ("two-site-jump", 0)])
def test_check_exit_codes(tmp_path, capsys, scenario, code):
    assert main(["check", "--scenario", scenario, "--out-dir", str(tmp_path)]) == code
    cert = json.loads((tmp_path / "certificate.json").read_text())
    assert "verdict=" in capsys.readouterr().out
    assert (tmp_path / "certificate.txt").exists() and cert["verdict"] in ("valid", "invalid", "boundary")


def test_missing_field_reports_line(tmp_path, capsys):
    text = OU_MODEL.replace("  D0: []\n", "")
    assert main(["check", "--config", write(tmp_path, text, "bad.yaml"), "--out-dir", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert "bad.yaml: line 2: missing required field 'D0' in 'model'" in err


def test_config_errors(tmp_path, capsys):
    assert main(["check", "--out-dir", str(tmp_path)]) == 1
    assert main(["check", "--scenario", "nope", "--out-dir", str(tmp_path)]) == 1
    cfg = write(tmp_path, "scenario: oscillator-pair\nparams: {bogus: 1}\n")
    assert main(["check", "--config", cfg, "--out-dir", str(tmp_path)]) == 1
    assert "unknown parameter 'bogus'" in capsys.readouterr().err
    with pytest.raises(ConfigError, match="duplicate"):
        config_from_text("seed: 1\nseed: 2\n")
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 1


def test_evolve_outputs_and_determinism(tmp_path):
    cfg = write(tmp_path, OU_MODEL)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["evolve", "--config", cfg, "--out-dir", str(a)]) == 0
    assert main(["evolve", "--config", cfg, "--out-dir", str(b)]) == 0
    for f in ("diagnostics.csv", "final_marginal.csv", "config.resolved.yaml", "certificate.json"):
        assert (a / f).read_bytes() == (b / f).read_bytes()
    snaps = sorted((a / "snapshots").iterdir())
    assert snaps[0].name == "snap_00000000.cqs"
    assert [p.read_bytes() for p in snaps] == [p.read_bytes() for p in sorted((b / "snapshots").iterdir())]
    s = load_snapshot(snaps[-1])
    assert s.total_trace() == pytest.approx(1.0, abs=1e-10)
    rows = list(csv.DictReader(open(a / "diagnostics.csv")))
    assert float(rows[-1]["t"]) == pytest.approx(0.5)
    resolved = config_from_text((a / "config.resolved.yaml").read_text())
    assert resolved.data["run"]["duration"] == 0.5


def test_zero_duration(tmp_path):
    cfg = write(tmp_path, OU_MODEL.replace("duration: 0.5", "duration: 0"))
    assert main(["evolve", "--config", cfg, "--out-dir", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "diagnostics.csv")))
    assert len(rows) == 1 and float(rows[0]["trace_err"]) == 0.0


def test_invalid_refused_unless_allowed(tmp_path, capsys):
    args = ["evolve", "--scenario", "two-site-jump-detuned", "--out-dir", str(tmp_path)]
    assert main(args) == 2
    assert "refusing" in capsys.readouterr().err
    assert not (tmp_path / "diagnostics.csv").exists()
    assert main(args + ["--allow-invalid", "--max-steps", "5"]) == 0
    assert len(list(csv.DictReader(open(tmp_path / "diagnostics.csv")))) == 6
    assert (tmp_path / "snapshots" / "snap_00000000.npy").exists()


def test_step_above_bound_is_config_error(tmp_path, capsys):
    cfg = write(tmp_path, OU_MODEL.replace("snapshot_stride: 10", "dt: 1.0"))
    assert main(["evolve", "--config", cfg, "--out-dir", str(tmp_path)]) == 1
    assert "stability bound" in capsys.readouterr().err


def test_moments_command(tmp_path, capsys):
    cfg = write(tmp_path, OU_MODEL + "moments: {point: [0.3], dt: 0.02}\n")
    assert main(["moments", "--config", cfg, "--out-dir", str(tmp_path)]) == 0
    assert "classification=consistent-with-continuous" in capsys.readouterr().out
    rows = {(r["n"], r["indices"]): float(r["re"]) for r in csv.DictReader(open(tmp_path / "moments.csv"))}
    assert rows[("1", "0")] == pytest.approx(-0.15, rel=0.02)
    assert (tmp_path / "pawula.txt").read_text().startswith("classification=")


SWEEP = """\
scenario: oscillator-pair
params: {points: 16}
run: {duration: 0.1, min_eig_stride: 2}
sweep: {parameter: tradeoff_ratio, values: [0.5, 1.0, 2.0]}
"""


def test_sweep(tmp_path):
    cfg = write(tmp_path, SWEEP)
    assert main(["sweep", "--config", cfg, "--out-dir", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "sweep.csv")))
    assert [r["verdict"] for r in rows] == ["invalid", "boundary", "valid"]
    assert [float(r["schur_margin"]) for r in rows] == pytest.approx([-0.5, 0.0, 1.0], abs=1e-12)
    assert all(r["time_to_negativity"] == "inf" for r in rows[1:])


def test_sweep_single_point_without_evolution(tmp_path):
    cfg = write(tmp_path, SWEEP.replace("[0.5, 1.0, 2.0]", "[1.5]\n  evolve: false").replace(
        "values: [1.5]\n  evolve: false}", "values: [1.5], evolve: false}"))
    assert main(["sweep", "--config", cfg, "--out-dir", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "sweep.csv")))
    assert len(rows) == 1 and rows[0]["verdict"] == "valid" and rows[0]["final_min_eig"] == "nan"


def test_worker_count(monkeypatch):
    monkeypatch.setenv("CQDYN_THREADS", "2")
    assert worker_count(5) == 2 and worker_count(1) == 1
    monkeypatch.setenv("CQDYN_THREADS", "many")
    with pytest.raises(ConfigError):
        worker_count(3)


def test_scenarios_listing(capsys):
    assert main(["scenarios"]) == 0
    out = capsys.readouterr().out
    assert "oscillator-pair-boundary" in out and "two-site-jump" in out


def test_console_entry_point(tmp_path):
    env = {**os.environ, "CQDYN_THREADS": "1"}
    r = subprocess.run([sys.executable, "-m", "cqdyn", "check", "--scenario", "oscillator-pair-violating",
                        "--out-dir", str(tmp_path)], capture_output=True, text=True, env=env)
    assert r.returncode == 2
    assert r.stdout.startswith("verdict=invalid")
