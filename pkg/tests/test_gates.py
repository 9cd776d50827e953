import json
import math

import numpy as np
import pytest

from qpescape.equilibria import Equilibrium, equilibria_at
from qpescape.gates import (GateReport, NoGateError, basin_saddles, default_grid,
                            escape_time_estimate, gate_bifurcation_scan, gate_heights,
                            write_gate_csv, write_scan_json)
from qpescape.model import three_node_slice, two_node
from qpescape.quasipotential import Grid2D, SolverParams, solve

GATE0 = 8 / 3 * 0.01**1.5


def gate_from(anchor, beta, n=256, net=None):
    net = (net or two_node()).with_beta(beta)
    eqs = equilibria_at(net)
    saddles = basin_saddles(net, anchor, eqs)
    grid = default_grid([eqs[k].position for k in [anchor, *saddles]], n)
    return gate_heights(solve(net, grid, eqs[anchor].position, anchor_label=anchor), saddles)


def test_escape_time_estimate():
    assert escape_time_estimate(0.0, 0.3) == 1.0
    assert escape_time_estimate(GATE0, 0.05) == pytest.approx(math.exp(1.0666667), rel=1e-6)
    u, s = 0.004, 0.05
    assert math.log(escape_time_estimate(u, 2 * s)) == pytest.approx(
        math.log(escape_time_estimate(u, s)) / 4)
    with pytest.raises(ValueError):
        escape_time_estimate(1.0, 0.0)


def test_symmetric_case_has_two_equal_gates():
    rep = gate_from("QQ", 0.0)
    assert set(rep.heights) == {"QS", "SQ"}
    assert rep.heights["QS"] == pytest.approx(GATE0, rel=0.02)
    assert rep.heights["SQ"] == pytest.approx(rep.heights["QS"], rel=0.01)
    assert rep.gate == "QS"  # ties broken by label


@pytest.mark.parametrize("beta", [0.05, 0.1, 0.17, 0.25])
def test_quiescent_anchor_uses_qs_gate(beta):
    assert gate_from("QQ", beta).gate == "QS"


@pytest.mark.parametrize("beta,gate", [(0.17, "AS"), (0.19, "SQ")])
def test_gate_switch_from_aq(beta, gate):
    rep = gate_from("AQ", beta)
    assert rep.gate == gate
    assert all(rep.heights[rep.gate] <= h for h in rep.heights.values() if h is not None)


@pytest.mark.parametrize("beta,gate", [(0.25, "AS"), (0.35, "QS")])
def test_active_anchor_gate(beta, gate):
    assert gate_from("AA", beta).gate == gate


def test_no_gate_error():
    net = two_node(0.0)
    qp = solve(net, Grid2D.square(64, -0.45, 0.35), [-0.1, -0.1])
    far = Equilibrium(np.array([1.0, 1.0]), np.array([-1.0, 1.0]), "saddle", "XX")
    rep = gate_heights(qp, {"XX": far, "QS": Equilibrium(np.array([-0.1, 0.1]),
                                                         np.array([-1.0, 1.0]), "saddle", "QS")})
    assert rep.heights["XX"] is None and rep.gate == "QS"
    with pytest.raises(NoGateError):
        gate_heights(qp, [far])


def test_scan_on_coarse_grid_finds_crossing(tmp_path):
    scan = gate_bifurcation_scan(two_node(), (0.15, 0.20), n=128, tol_beta=2e-3, n_coarse=4)
    assert scan.crossing is not None
    a, b = scan.bracket
    assert b - a <= 2e-3 and a <= scan.crossing <= b
    assert 0.17 < scan.crossing < 0.20
    d = scan.differences()
    assert np.all(np.diff(scan.betas) > 0)
    assert d[0] > 0 > d[-1]
    write_scan_json(tmp_path / "s.json", scan)
    doc = json.loads((tmp_path / "s.json").read_text())
    assert doc["result"] == "crossing" and doc["grid"]["nx"] == 128
    write_gate_csv(tmp_path / "g.csv", scan.reports)
    rows = (tmp_path / "g.csv").read_text().splitlines()
    assert len(rows) == 2 + 2 * len(scan.reports)


def test_scan_truncates_at_participant_fold():
    with pytest.warns(UserWarning, match="truncated"):
        scan = gate_bifurcation_scan(three_node_slice(0.0, "A"), (0.001, 0.05), n=128,
                                     n_coarse=3)
    assert scan.truncated is not None
    assert max(scan.betas) < 0.0101
    assert scan.crossing is None and scan.summary()["result"] == "no crossing"


def test_scan_rejects_missing_participant():
    with pytest.raises(ValueError):
        gate_bifurcation_scan(two_node(), (0.25, 0.3), pair=("SQ", "AS"), n=128)


def test_gate_report_rows():
    rep = GateReport(0.1, "QQ", {"QS": 0.1, "SQ": None}, "QS")
    assert list(rep.rows()) == [(0.1, "QQ", "QS", 0.1, True), (0.1, "QQ", "SQ", None, False)]
