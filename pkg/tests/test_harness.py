import subprocess
import sys

import pytest

from dtnmap import harness
from dtnmap.dense_nd import FactorizationError
from dtnmap.harness import COLUMNS, main, read_rows


def run(tmp_path, *args):
    out = tmp_path / "rows.csv"
    code = main(["--csv", str(out), *args])
    return code, (read_rows(out) if out.exists() else [])


def test_csv_roundtrip(tmp_path):
    code, rows = run(tmp_path, "--problem", "laplace", "helmholtz1", "--n", "24", "--engine", "both",
                     "--nleaf", "64", "--crossover", "32")
    assert code == 0
    assert list(rows[0]) == COLUMNS
    assert [(r["problem"], r["engine"]) for r in rows] == [
        ("laplace", "dense"), ("laplace", "accel"), ("helmholtz1", "dense"), ("helmholtz1", "accel")]
    for r in rows:
        assert r["status"] == "ok" and r["N"] == "576"
        assert float(r["e1"]) <= 1e-6 and float(r["M_bytes"]) > 0
        assert float(r["M_over_n"]) == pytest.approx(float(r["M_bytes"]) / 24, rel=1e-5)


def test_bad_arguments_exit_2(tmp_path, capsys):
    assert main(["--problem", "poisson"]) == 2
    assert main(["--n", "3"]) == 2
    assert main(["--nleaf", "4"]) == 2
    assert main(["--epsilon", "0"]) == 2
    assert main(["--config", str(tmp_path / "missing.cfg")]) == 2
    # a load file that does not fit the grid is reported as an argument problem
    loads = tmp_path / "loads.txt"
    loads.write_text("40 40\n")
    assert main(["--n", "16", "--bodyloads", str(loads), "--skip-errors"]) == 2


def test_accuracy_check_exit_4(tmp_path):
    code, rows = run(tmp_path, "--problem", "laplace", "--n", "40", "--nleaf", "64", "--crossover", "32",
                     "--epsilon", "1e-2", "--check", "--check-tol", "1e-9")
    assert code == 4 and rows[0]["status"] == "check_failed"


def test_build_failure_exit_3(tmp_path, monkeypatch):
    def broken(*a, **k):
        raise FactorizationError("root Schur complement", 0, 0)

    monkeypatch.setattr(harness, "build", broken)
    code, rows = run(tmp_path, "--n", "16", "--skip-errors")
    assert code == 3 and rows[0]["status"] == "build_failed" and rows[0]["e1"] == ""


def test_config_and_diagnostics(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("problem = diffconv1\nn = 40\nN_leaf = 64\ntolerance = 1e-8\n")
    prefix = tmp_path / "diag"
    code, rows = run(tmp_path, "--config", str(cfg), "--crossover", "32", "--diagnostics", str(prefix),
                     "--skip-errors", "--repeat", "2")
    assert code == 0
    r = rows[0]
    assert (r["problem"], r["n"], r["epsilon"], r["e1"]) == ("diffconv1", "40", "1e-08", "")
    diag = tmp_path / "diag_diffconv1_40_accel.csv"
    assert diag.read_text().startswith("level,boxes")


def test_body_loads_from_cli(tmp_path):
    loads = tmp_path / "loads.txt"
    loads.write_text("10 10\n12 11\n")
    code, rows = run(tmp_path, "--n", "24", "--nleaf", "64", "--bodyloads", str(loads), "--engine", "both")
    assert code == 0 and all(r["status"] == "ok" for r in rows)


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "dtnmap", "--n", "12", "--nleaf", "64", "--skip-errors"],
                         capture_output=True, text=True, check=False)
    assert res.returncode == 0
    assert res.stdout.splitlines()[0] == ",".join(COLUMNS)
