import csv
import json
import subprocess
import sys

import pytest

from qpescape.cli import main, parse_sweep


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def test_parse_sweep():
    assert parse_sweep("0:0.3:0.1") == [0.0, 0.1, 0.2, 0.3]
    assert parse_sweep("0.1,0.2") == [0.1, 0.2]
    assert parse_sweep([0.05]) == [0.05]
    assert parse_sweep(None) == []


def test_equilibria_table(tmp_path):
    assert main(["equilibria", "--preset", "two-node", "--out", str(tmp_path)]) == 0
    rows = read_rows(tmp_path / "bifurcations.csv")
    got = sorted(round(float(r["beta"]), 4) for r in rows)
    assert got == [0.01, 0.18, 0.2025, 0.3025]
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["command"] == "equilibria" and man["config"]["preset"] == "two-node"


def test_equilibria_slice_has_second_fold(tmp_path):
    assert main(["equilibria", "--preset", "three-node-slice-Q", "--out", str(tmp_path)]) == 0
    betas = [float(r["beta"]) for r in read_rows(tmp_path / "bifurcations.csv")]
    assert any(abs(b - 0.061) < 0.002 for b in betas)


def test_equilibria_single_beta(tmp_path):
    args = ["equilibria", "--beta-min", "0.05", "--beta-max", "0.05", "--out", str(tmp_path)]
    assert main(args) == 0
    assert len(read_rows(tmp_path / "equilibria.csv")) == 7
    assert not (tmp_path / "branches.csv").exists()


def test_qp_reports_gate_and_field(tmp_path):
    args = ["qp", "--preset", "two-node", "--beta", "0.1", "--anchor", "QQ", "--grid", "128",
            "--out", str(tmp_path / "qp")]
    assert main(args) == 0
    rep = json.loads((tmp_path / "qp" / "gates.json").read_text())
    assert rep["gate"] == "QS"
    assert main(["contours", "--field", str(tmp_path / "qp" / "field.qpf"), "--levels", "0.001",
                 "--out", str(tmp_path / "c")]) == 0
    assert read_rows(tmp_path / "c" / "contours.csv")


def test_qp_symmetric_gates(tmp_path):
    assert main(["qp", "--beta", "0", "--grid", "256", "--out", str(tmp_path)]) == 0
    h = json.loads((tmp_path / "gates.json").read_text())["heights"]
    assert h["QS"] == pytest.approx(h["SQ"], rel=0.01)


def test_eliminated_anchor_exit_code(tmp_path, capsys):
    args = ["qp", "--beta", "0.25", "--anchor", "AQ", "--out", str(tmp_path)]
    assert main(args) == 4
    err = capsys.readouterr().err
    assert "0.2025" in err and "saddle-node" in err


def test_configuration_and_numerical_errors(tmp_path, capsys):
    assert main(["mc", "--xi", "2", "--out", str(tmp_path)]) == 2
    assert main(["qp", "--preset", "three-node", "--out", str(tmp_path)]) == 2
    assert main(["qp", "--anchor", "QS", "--out", str(tmp_path)]) == 2
    assert main(["qp", "--grid", "20", "--out", str(tmp_path)]) == 3
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["mc", "--config", str(bad)]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["nonsense"])
    assert exc.value.code == 2


def test_gatescan_no_crossing(tmp_path):
    args = ["gatescan", "--preset", "three-node-slice-A", "--beta-range", "0.001", "0.0101",
            "--grid", "128", "--n-coarse", "3", "--out", str(tmp_path)]
    with pytest.warns(UserWarning):
        assert main(args) == 0
    doc = json.loads((tmp_path / "gatescan.json").read_text())
    assert doc["result"] == "no crossing" and doc["crossing"] is None


def test_mc_sweep_and_manifest_rerun(tmp_path):
    out1 = tmp_path / "a"
    args = ["mc", "--beta", "0,0.1", "--n", "8", "--seed", "5", "--out", str(out1)]
    assert main(args) == 0
    sweep = read_rows(out1 / "sweep.csv")
    assert [float(r["beta"]) for r in sweep] == [0.0, 0.1]
    out2 = tmp_path / "b"
    assert main(["mc", "--config", str(out1 / "manifest.json"), "--out", str(out2)]) == 0
    for sub in out1.glob("nu=*"):
        assert (sub / "records.csv").read_bytes() == (out2 / sub.name / "records.csv").read_bytes()


def test_single_realisation_is_deterministic(tmp_path):
    for d in ("x", "y"):
        assert main(["mc", "--beta", "0.1", "--n", "1", "--seed", "7",
                     "--out", str(tmp_path / d)]) == 0
    a = next((tmp_path / "x").glob("nu=*")) / "records.csv"
    b = next((tmp_path / "y").glob("nu=*")) / "records.csv"
    assert a.read_bytes() == b.read_bytes()


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("QPESCAPE_OUTPUT", str(tmp_path))
    assert main(["equilibria", "--beta-max", "0.02"]) == 0
    assert (tmp_path / "equilibria" / "manifest.json").exists()


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "qpescape", "--version"], capture_output=True,
                       text=True)
    assert r.returncode == 0 and r.stdout.strip()
