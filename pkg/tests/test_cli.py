import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from helpers import m2_model
from klq.cli import run
from klq.io import load_model, model_to_dict, save_model


@pytest.fixture
def m2_config(tmp_path):
    save_model(m2_model(), tmp_path / "m2.json")
    cfg = {
        "model_file": "m2.json",
        "reference": {"constant": 0.7},
        "kappa": 1.0,
        "basis": "degenerate",
        "out_dir": str(tmp_path / "out"),
    }
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg))
    return path


def _tcl_config(tmp_path, **extra):
    cfg = {
        "tcl": {"horizon": 12},
        "reference": {"sinusoid": {"headroom_fraction": 0.3, "period": 12}},
        "kappa": 100.0,
        "basis": "degenerate",
        "out_dir": str(tmp_path / "out"),
        "seed": 3,
    }
    cfg.update(extra)
    path = tmp_path / "tcl.json"
    path.write_text(json.dumps(cfg))
    return path


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_model_round_trip(tmp_path):
    m = m2_model()
    save_model(m, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    assert model_to_dict(back) == model_to_dict(m)


def test_solve_m2(m2_config, capsys):
    assert run(["solve", "--config", str(m2_config)]) == 0
    out = m2_config.parent / "out"
    doc = json.loads((out / "solution.json").read_text())
    assert doc["converged"]
    assert np.allclose(doc["lambda"], 0.16006819, atol=1e-7)
    assert set(doc["diagnostics"]) >= {"relative_entropy", "primal_full", "primal_relaxed", "gap", "rms_tracking_error"}
    rows = _rows(out / "tracking.csv")
    assert rows[0] == ["k", "r", "achieved", "error"]
    assert len(rows) == 1 + 2
    man = json.loads((out / "manifest.json").read_text())
    for key in ("artifact_version", "seed", "config_hash", "config", "solver", "created", "files"):
        assert key in man
    assert "dual=" in capsys.readouterr().out


def test_flags_override_config(m2_config):
    assert run(["solve", "--config", str(m2_config), "--kappa", "1e-6", "--direction", "cg"]) == 0
    doc = json.loads((m2_config.parent / "out" / "solution.json").read_text())
    assert np.allclose(doc["lambda"], 2e-7, rtol=1e-3)


def test_data_files_are_byte_identical_on_rerun(m2_config, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["solve", "--config", str(m2_config), "--out-dir", str(a)]) == 0
    assert run(["solve", "--config", str(m2_config), "--out-dir", str(b)]) == 0
    names = sorted(p.name for p in a.iterdir() if p.name != "manifest.json")
    assert names == sorted(p.name for p in b.iterdir() if p.name != "manifest.json")
    for name in names:
        assert (a / name).read_bytes() == (b / name).read_bytes()
    ma, mb = (json.loads((d / "manifest.json").read_text()) for d in (a, b))
    assert ma["config_hash"] != mb["config_hash"]  # out_dir is part of the config
    assert not list(a.glob("*.tmp*"))


def test_unknown_flag_exits_2(m2_config):
    with pytest.raises(SystemExit) as exc:
        run(["solve", "--config", str(m2_config), "--bogus"])
    assert exc.value.code == 2


def test_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"tcl": {}, "model_file": "x", "kappa": 1}))
    assert run(["solve", "--config", str(bad)]) == 2
    bad.write_text("{not json")
    assert run(["solve", "--config", str(bad)]) == 2
    bad.write_text(json.dumps({"tcl": {"horizon": 4}, "reference": {"constant": 0}, "kappa": -1}))
    assert run(["solve", "--config", str(bad)]) == 2
    bad.write_text(json.dumps({"tcl": {"horizon": 4}, "reference": {"constant": 0}, "kappa": 1, "solver": {"speed": 3}}))
    assert run(["solve", "--config", str(bad)]) == 2
    assert "config error" in capsys.readouterr().err


def test_validate_reports_bad_row(tmp_path, capsys):
    doc = model_to_dict(m2_model())
    doc["kernels"][0][1] = [0.3, 0.3]
    (tmp_path / "m.json").write_text(json.dumps(doc))
    (tmp_path / "v.json").write_text(json.dumps({"model_file": "m.json"}))
    assert run(["validate", "--config", str(tmp_path / "v.json")]) == 1
    assert "row 1" in capsys.readouterr().out


def test_validate_ok_and_export(m2_config, tmp_path):
    dest = tmp_path / "exported.json"
    assert run(["validate", "--config", str(m2_config), "--export-model", str(dest)]) == 0
    assert model_to_dict(load_model(dest)) == model_to_dict(m2_model())


def test_solve_rejects_invalid_model(tmp_path):
    doc = model_to_dict(m2_model())
    doc["nominal_policies"] = [[0.9, 0.3], [0.5, 0.5]]
    (tmp_path / "m.json").write_text(json.dumps(doc))
    (tmp_path / "s.json").write_text(json.dumps({"model_file": "m.json", "reference": {"constant": 0.5}, "kappa": 1}))
    assert run(["solve", "--config", str(tmp_path / "s.json")]) == 1


def test_strict_non_convergence_exits_1(tmp_path):
    cfg = _tcl_config(tmp_path)
    assert run(["solve", "--config", str(cfg), "--max-iters", "1"]) == 0
    assert run(["solve", "--config", str(cfg), "--max-iters", "1", "--strict"]) == 1


def test_unwritable_out_dir_exits_1(m2_config, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run(["solve", "--config", str(m2_config), "--out-dir", str(blocker / "sub")]) == 1


def test_tcl_solve_and_simulate(tmp_path):
    cfg = _tcl_config(tmp_path, snapshots=[0, 12])
    assert run(["solve", "--config", str(cfg)]) == 0
    out = tmp_path / "out"
    assert len(_rows(out / "tracking.csv")) == 13
    marg = _rows(out / "marginals_k12.csv")
    assert marg[0] == ["state", "input", "probability"]
    assert sum(float(r[2]) for r in marg[1:]) == pytest.approx(1.0)
    assert run(["simulate", "--config", str(cfg), "--agents", "2000"]) == 0
    trace = _rows(out / "trace.csv")
    assert trace[0] == ["k", "r_k", "mean_power", "deviation", "tv_max"]
    assert len(trace) == 13
    assert json.loads((out / "manifest.json").read_text())["agents"] == 2000


def test_tcl_coupling_csv(tmp_path):
    cfg = _tcl_config(tmp_path, reference={"constant": 0.0}, coupling={"kappas": [10.0, 50.0]})
    assert run(["coupling", "--config", str(cfg)]) == 0
    rows = _rows(tmp_path / "out" / "coupling.csv")
    assert rows[0][:3] == ["kappa", "k", "tv_max"]
    assert len(rows[0]) == 3 + 15  # all pairs among six initial marginals
    assert len(rows) == 1 + 2 * 13
    for r in rows[1:]:
        assert float(r[2]) == pytest.approx(max(float(x) for x in r[3:]))


def test_mpc_command(tmp_path):
    cfg = _tcl_config(tmp_path, mpc={"window": 6, "step": 3, "agents": 1000})
    assert run(["mpc", "--config", str(cfg)]) == 0
    out = tmp_path / "out"
    assert len(_rows(out / "windows.csv")) == 1 + 4
    assert len(_rows(out / "trace.csv")) == 13
    bad = _tcl_config(tmp_path, mpc={"window": 3, "step": 6})
    assert run(["mpc", "--config", str(bad)]) == 2


def test_console_script_entry_point(m2_config):
    proc = subprocess.run(
        [sys.executable, "-m", "klq.cli", "solve", "--config", str(m2_config)], capture_output=True, text=True
    )
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run([sys.executable, "-m", "klq.cli", "frobnicate"], capture_output=True, text=True)
    assert proc.returncode == 2
