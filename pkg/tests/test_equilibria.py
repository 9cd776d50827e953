import math

import numpy as np
import pytest

from qpescape.equilibria import (bifurcation_diagram, classify, continue_branch,
                                 equilibria_at, find_equilibria, stability_of,
                                 write_bifurcations_csv, write_branches_csv)
from qpescape.model import node_drift, three_node_chain, three_node_slice, two_node


def fold_of_driven_node(x_drive, nu):
    """Saddle-nodes of f(x) + beta (x_drive - x) = 0, i.e. f(x) = f'(x)(x - x_drive), beta = f'(x).

    Solved independently through the cubic's polynomial coefficients.
    """
    f = np.poly1d([-1, 1, nu, -nu])  # -(x-1)(x^2-nu)
    df = f.deriv()
    roots = (f - df * np.poly1d([1, -x_drive])).roots
    out = []
    for x in roots[np.isreal(roots)].real:
        beta = df(x)
        if beta > 0:
            out.append((float(beta), float(x)))
    return sorted(out)


def sn(diagram, *labels):
    return next(bp for bp in diagram.bifurcations if set(bp.participants) == set(labels))


def test_two_node_bifurcation_values():
    nu = 0.01
    d = bifurcation_diagram(two_node())
    kinds = [(bp.kind, bp.participants) for bp in d.bifurcations]
    assert kinds == [("saddle-node", ("QA", "SA")), ("transcritical", ("QS", "SS")),
                     ("saddle-node", ("AQ", "SQ")), ("saddle-node", ("AS", "SS"))]
    assert sn(d, "QA", "SA").beta == pytest.approx(nu, abs=1e-6)
    assert sn(d, "QS", "SS").beta == pytest.approx(2 * math.sqrt(nu) - 2 * nu, abs=1e-6)
    (b2, x2), = [v for v in fold_of_driven_node(-math.sqrt(nu), nu) if v[1] > 0.3]
    (b3, x3), = [v for v in fold_of_driven_node(math.sqrt(nu), nu) if v[1] > 0.3]
    assert b2 == pytest.approx(0.2025, abs=1e-12) and x2 == pytest.approx(0.55)
    assert b3 == pytest.approx(0.3025, abs=1e-12) and x3 == pytest.approx(0.45)
    assert sn(d, "AQ", "SQ").beta == pytest.approx(b2, abs=1e-6)
    assert sn(d, "AS", "SS").beta == pytest.approx(b3, abs=1e-6)
    np.testing.assert_allclose(sn(d, "AQ", "SQ").position, [0.55, -0.1], atol=1e-4)


@pytest.mark.parametrize("nu", [0.001, 0.005])
def test_other_nu_values(nu):
    d = bifurcation_diagram(two_node(nu=nu))
    tc = [bp for bp in d.bifurcations if bp.kind == "transcritical"]
    assert len(tc) == 1
    assert tc[0].beta == pytest.approx(2 * math.sqrt(nu) - 2 * nu, abs=1e-6)
    (b2, _), = [v for v in fold_of_driven_node(-math.sqrt(nu), nu) if v[1] > 0.3]
    assert sn(d, "AQ", "SQ").beta == pytest.approx(b2, abs=1e-6)


def test_slice_with_quiescent_driver():
    d = bifurcation_diagram(three_node_slice(0.0, "Q"))
    assert sn(d, "QS", "SS").beta == pytest.approx(0.0613, abs=5e-4)
    assert sn(d, "AQ", "SQ").beta == pytest.approx(0.2025, abs=1e-5)


def test_slice_with_active_driver_loses_four_states_early():
    d = bifurcation_diagram(three_node_slice(0.0, "A"))
    assert len(d.bifurcations) == 4
    assert all(abs(bp.beta - 0.01) < 2e-4 for bp in d.bifurcations)


def test_find_equilibria_counts_and_stability():
    eqs = find_equilibria(two_node(0.0))
    assert sorted(e.label for e in eqs) == sorted(a + b for a in "QSA" for b in "QSA")
    stab = {e.label: e.stability for e in eqs}
    assert stab["QQ"] == stab["AA"] == stab["AQ"] == stab["QA"] == "sink"
    assert stab["SS"] == "source" and stab["QS"] == "saddle"
    for e in eqs:
        assert np.max(np.abs(two_node().drift(e.position))) < 1e-10
    assert len(find_equilibria(two_node(0.05))) == 7
    assert len(find_equilibria(three_node_chain(0.0), domain=((-0.6, 1.4),) * 3,
                               seed_density=9)) == 27


def test_stability_rules():
    assert stability_of(np.array([-1.0, -2.0])) == "sink"
    assert stability_of(np.array([1.0, 2.0])) == "source"
    assert stability_of(np.array([-1.0, 2.0])) == "saddle"
    assert stability_of(np.array([0.0, -1.0])) == "nonhyperbolic"


def test_continuation_follows_analytic_branch():
    net = two_node()
    eqs = {e.label: e for e in find_equilibria(net)}
    br = continue_branch(eqs["SA"], net, (0.0, 0.008))
    for beta, x in zip(br.betas, br.positions):
        # x2 = 1 and f(x1) + beta(1 - x1) = 0
        assert x[1] == pytest.approx(1.0)
        assert node_drift(x[0], 0.01) + beta * (1 - x[0]) == pytest.approx(0, abs=1e-10)
    assert br.terminated_by is None


def test_labels_follow_stability_through_transcritical():
    d = bifurcation_diagram(two_node())
    eq = equilibria_at(two_node(0.25), diagram=d)
    # past the transcritical point QS sits at (x_S, x_S) and SS moves on to meet AS
    assert "AQ" not in eq and "SQ" not in eq
    np.testing.assert_allclose(eq["QS"].position, [0.1, 0.1], atol=1e-12)
    assert eq["QS"].stability == "saddle" and eq["AS"].stability == "saddle"
    assert eq["SS"].stability == "source"
    assert classify(eq["SS"].position, two_node(0.25))[0] == "source"
    assert "SS" not in equilibria_at(two_node(0.31), diagram=d)
    assert d.eliminated_by("AQ").beta == pytest.approx(0.2025, abs=1e-6)


def test_csv_writers(tmp_path):
    d = bifurcation_diagram(two_node())
    write_branches_csv(tmp_path / "b.csv", d.branches)
    write_bifurcations_csv(tmp_path / "f.csv", d.bifurcations)
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert lines[0].startswith("# qpescape-schema")
    assert len(lines) == 2 + 4
    assert (tmp_path / "b.csv").read_text().count("\n") > 1000
