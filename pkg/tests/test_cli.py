import csv
import json
import subprocess
import sys

import pytest

from biot_estimate import equilibrate
from biot_estimate.biot import BiotParameters
from biot_estimate.cli import ConfigError, load_config, main
from biot_estimate.estimate import ReliabilityConstants, total_bound

COLUMNS = ("level,N,h,eta_S,eta_A,eta_C,eta_F,eta_P,bound,err_u,err_p,err_phi,err_total,"
           "effectivity,marked,seconds").split(",")


def write_cfg(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_solve_report(tmp_path):
    cfg = write_cfg(tmp_path, {"problem": {"type": "manufactured"}})
    assert main(["solve", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    rep = json.loads((tmp_path / "o" / "report.json").read_text())
    eta = rep["estimators"]
    assert len(eta) == 5 and all(v >= 0 for v in eta.values())
    c = rep["constants"]
    consts = ReliabilityConstants(C_K=c["C_K"], C_D=c["C_D"], C_F=c["C_F"])
    prm = BiotParameters(**rep["params"])
    order = [eta[k] for k in ("eta_S", "eta_A", "eta_C", "eta_F", "eta_P")]
    assert abs(total_bound(order, consts, prm) - rep["bound"]) <= 1e-12 * rep["bound"]
    assert rep["error"]["total"] ** 2 <= rep["bound"]


def test_negative_tau(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {"problem": {"type": "manufactured"}, "params": {"tau": -1.0}})
    assert main(["solve", "--config", cfg, "--out", str(tmp_path)]) == 1
    assert "params/tau" in capsys.readouterr().err


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="problem/type"):
        load_config({"problem": {"type": "torus"}})
    with pytest.raises(ConfigError, match="problem/mesh"):
        load_config({"problem": {"type": "external"}})
    with pytest.raises(ConfigError, match="not valid JSON"):
        bad = tmp_path / "bad.json"
        bad.write_text("{")
        load_config(str(bad))
    assert main(["solve"]) == 1


def test_uniform_study(tmp_path):
    cfg = write_cfg(tmp_path, {"problem": {"type": "manufactured", "refinements": 1},
                               "adapt": {"max_levels": 4}})
    assert main(["study", "--config", cfg, "--out", str(tmp_path)]) == 0
    data = rows(tmp_path / "history.csv")
    assert list(data[0].keys()) == COLUMNS
    assert len(data) == 4
    n = [int(r["N"]) for r in data]
    assert all(a < b for a, b in zip(n, n[1:]))
    assert all(r["err_total"] != "" for r in data)


def test_csv_byte_identical(tmp_path):
    cfg = write_cfg(tmp_path, {"problem": {"type": "manufactured", "refinements": 1},
                               "adapt": {"mode": "adaptive", "max_levels": 3}})
    for d in ("a", "b"):
        assert main(["study", "--config", cfg, "--out", str(tmp_path / d)]) == 0
    a = (tmp_path / "a" / "history.csv").read_bytes()
    assert a == (tmp_path / "b" / "history.csv").read_bytes()


def test_lambda_sweep(tmp_path):
    cfg = write_cfg(tmp_path, {"problem": {"type": "manufactured", "refinements": 1},
                               "adapt": {"max_levels": 2}})
    assert main(["study", "--config", cfg, "--out", str(tmp_path), "--sweep", "lambda"]) == 0
    names = sorted(p.name for p in tmp_path.glob("history_lambda_*.csv"))
    assert names == ["history_lambda_1e0.csv", "history_lambda_1e2.csv",
                     "history_lambda_1e4.csv", "history_lambda_1e8.csv"]
    # the sweep really changes the problem
    b0 = rows(tmp_path / names[0])[-1]["bound"]
    b8 = rows(tmp_path / names[-1])[-1]["bound"]
    assert b0 != b8


def test_dorfler_sweep_lshape(tmp_path):
    cfg = write_cfg(tmp_path, {"problem": {"type": "lshape", "refinements": 1},
                               "adapt": {"max_levels": 2, "reference": "none"}})
    assert main(["study", "--config", cfg, "--out", str(tmp_path), "--sweep", "dorfler"]) == 0
    files = sorted(tmp_path.glob("history_dorfler_*.csv"))
    assert [p.name for p in files] == [f"history_dorfler_{t}.csv" for t in
                                       ("0.2", "0.3", "0.4", "0.5", "0.6", "0.8", "1.0")]
    for p in files:
        data = rows(p)
        assert len(data) == 2 and data[0]["err_total"] == ""
    # a larger fraction marks more elements
    marked = [int(rows(p)[0]["marked"]) for p in files]
    assert marked == sorted(marked)


def test_check_passes(capsys):
    assert main(["check"]) == 0
    assert "check passed" in capsys.readouterr().out


def test_check_fault(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {"problem": {"type": "manufactured"},
                               "check": {"inject_fault": True}})
    assert main(["check", "--config", cfg]) == 3
    assert "equilibrate.stress_divergence" in capsys.readouterr().err


def test_vtk_and_indicators(tmp_path):
    cfg = write_cfg(tmp_path, {"problem": {"type": "manufactured"},
                               "output": {"vtk": True, "indicators": True}})
    assert main(["solve", "--config", cfg, "--out", str(tmp_path)]) == 0
    text = (tmp_path / "solution.vtk").read_text().splitlines()
    assert text[0].startswith("# vtk DataFile")
    ne = json.loads((tmp_path / "report.json").read_text())["num_elements"]
    assert f"CELL_DATA {ne}" in text and "TENSORS theta_R double" in text
    assert len(rows(tmp_path / "indicators.csv")) == ne


def test_threads_env(monkeypatch):
    monkeypatch.setenv("BIOT_ESTIMATE_THREADS", "3")
    assert equilibrate.thread_count() == 3
    monkeypatch.setenv("BIOT_ESTIMATE_THREADS", "lots")
    assert equilibrate.thread_count() == 1
    monkeypatch.delenv("BIOT_ESTIMATE_THREADS")
    assert equilibrate.thread_count() == 1


def test_threads_same_output(tmp_path, monkeypatch):
    cfg = write_cfg(tmp_path, {"problem": {"type": "manufactured"}})
    out = {}
    for n in ("1", "4"):
        monkeypatch.setenv("BIOT_ESTIMATE_THREADS", n)
        assert main(["solve", "--config", cfg, "--out", str(tmp_path / n)]) == 0
        out[n] = (tmp_path / n / "report.json").read_bytes()
    assert out["1"] == out["4"]


def test_console_script_entry(tmp_path):
    cfg = write_cfg(tmp_path, {"problem": {"type": "manufactured"}, "params": {"mu": 0}})
    res = subprocess.run([sys.executable, "-m", "biot_estimate.cli", "solve", "--config", cfg],
                         capture_output=True, text=True)
    assert res.returncode == 1 and "params/mu" in res.stderr


def test_unstable_mesh_is_config_error(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {"problem": {"type": "manufactured", "refinements": 0}})
    assert main(["solve", "--config", cfg, "--out", str(tmp_path)]) == 1
    assert "two boundary edges" in capsys.readouterr().err
