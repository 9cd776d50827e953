import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qpescape.model import (ModelParams, NetworkDrift, NodeStates, label_of, load_network,
                            node_drift, node_drift_derivative, potential_uncoupled, preset,
                            single_node, state_from_label, three_node_chain, three_node_slice,
                            two_node)

coord = st.floats(-1.5, 1.5, allow_nan=False)
betas = st.floats(0.0, 0.5)


def test_node_states_are_roots():
    for nu in (0.001, 0.01, 0.2):
        s = NodeStates.from_nu(nu)
        assert s.x_Q == pytest.approx(-math.sqrt(nu))
        assert s.x_S == pytest.approx(math.sqrt(nu))
        for x in (s.x_Q, s.x_S, s.x_A):
            assert abs(node_drift(x, nu)) < 1e-15
        assert node_drift_derivative(s.x_Q, nu) < 0 < node_drift_derivative(s.x_S, nu)
        assert node_drift_derivative(s.x_A, nu) < 0


def test_param_validation():
    with pytest.raises(ValueError):
        ModelParams(nu=0.0)
    with pytest.raises(ValueError):
        ModelParams(beta=-0.1)
    with pytest.raises(ValueError):
        ModelParams(alpha=-1)
    with pytest.raises(ValueError):
        NetworkDrift(2, ((0, 2),))
    with pytest.raises(ValueError):
        NetworkDrift(2, ((1, 1),))
    with pytest.raises(ValueError):
        NetworkDrift(1, (), frozen={0: 0.0})


def test_two_node_drift_by_hand():
    net = two_node(0.1)
    x = np.array([0.3, -0.2])
    f = net.drift(x)
    assert f[0] == pytest.approx(-(0.3 - 1) * (0.09 - 0.01) + 0.1 * (-0.2 - 0.3))
    assert f[1] == pytest.approx(-(-0.2 - 1) * (0.04 - 0.01))


def test_drift_rejects_wrong_dimension():
    with pytest.raises(ValueError):
        two_node().drift([0.1, 0.2, 0.3])


@settings(max_examples=60, deadline=None)
@given(x1=coord, x2=coord, x3=coord, beta=betas)
def test_jacobian_matches_finite_differences(x1, x2, x3, beta):
    net = three_node_chain(beta)
    x = np.array([x1, x2, x3])
    J = net.jacobian(x)
    h = 1e-6
    fd = np.column_stack([(net.drift(x + h * e) - net.drift(x - h * e)) / (2 * h)
                          for e in np.eye(3)])
    np.testing.assert_allclose(J, fd, atol=1e-7)


@settings(max_examples=40, deadline=None)
@given(x1=coord, x2=coord)
def test_uncoupled_drift_is_minus_potential_gradient(x1, x2):
    net = two_node(0.0)
    h = 1e-6
    grad = [(potential_uncoupled(x1 + h, x2, 0.01) - potential_uncoupled(x1 - h, x2, 0.01)) / (2 * h),
            (potential_uncoupled(x1, x2 + h, 0.01) - potential_uncoupled(x1, x2 - h, 0.01)) / (2 * h)]
    np.testing.assert_allclose(net.drift([x1, x2]), -np.array(grad), atol=1e-7)


@settings(max_examples=40, deadline=None)
@given(x1=coord, x2=coord, beta=betas, x3=st.sampled_from("QSA"))
def test_slice_agrees_with_chain(x1, x2, beta, x3):
    sl = three_node_slice(beta, x3)
    full = three_node_chain(beta)
    v = full.states.value(x3)
    np.testing.assert_allclose(sl.drift([x1, x2]), full.drift([x1, x2, v])[:2], atol=1e-14)


def test_batched_evaluation():
    net = two_node(0.2)
    xs = np.random.default_rng(0).uniform(-1, 1, (5, 3, 2))
    f = net.drift(xs)
    J = net.jacobian(xs)
    assert f.shape == (5, 3, 2) and J.shape == (5, 3, 2, 2)
    np.testing.assert_allclose(f[2, 1], net.drift(xs[2, 1]))
    np.testing.assert_allclose(J[4, 0], net.jacobian(xs[4, 0]))


def test_laplacian_direction():
    C = two_node().laplacian()
    np.testing.assert_array_equal(C, [[-1, 1], [0, 0]])
    M, b = three_node_slice(0.2, "A").linear_part()
    np.testing.assert_allclose(M, 0.2 * np.array([[-1, 1], [0, -1]]))
    np.testing.assert_allclose(b, [0.0, 0.2])


def test_roundtrip(tmp_path):
    net = three_node_slice(0.07, "A", nu=0.02, alpha=0.04)
    p = tmp_path / "m.json"
    p.write_text(json.dumps(net.to_dict()))
    assert load_network(p) == net
    with pytest.raises(ValueError):
        NetworkDrift.from_dict({"edges": []})


def test_presets_and_labels():
    assert preset("two-node", beta=0.1).beta == 0.1
    assert preset("three-node-slice-Q").frozen == ((2, -0.1),)
    with pytest.raises(ValueError):
        preset("ring")
    net = two_node()
    np.testing.assert_allclose(state_from_label(net, "AQ"), [1.0, -0.1])
    assert label_of(net, [0.95, 0.12]) == "AS"
    assert single_node().dim == 1
    with pytest.raises(ValueError):
        state_from_label(net, "A")
