"""Two uncoupled bistable nodes: the quasipotential is twice the potential.

Run: python demos/01_uncoupled_landscape.py
"""
import numpy as np

from qpescape import Grid2D, equilibria_at, sample_field, solve, two_node
from qpescape.model import potential_uncoupled

nu = 0.01
net = two_node(beta=0.0, nu=nu)

# nine equilibria at beta = 0: products of Q, S, A per node
eqs = equilibria_at(net)
for label, eq in sorted(eqs.items()):
    print(f"{label}  {eq.position.round(4)}  {eq.stability}")

# quasipotential from the all-quiescent state on the window around Q and S
grid = Grid2D.square(256, -0.45, 0.35)
qp = solve(net, grid, eqs["QQ"].position, anchor_label="QQ")

# inside the basin U and 2(V - V(x_QQ)) should coincide
X, Y = grid.mesh()
twice_dv = 2 * (potential_uncoupled(X, Y, nu) - potential_uncoupled(-0.1, -0.1, nu))
gate = 8 / 3 * nu**1.5
inside = qp.accepted & (X < 0.1) & (Y < 0.1) & (twice_dv < gate)
print("max |U - 2 dV| / gate:", np.max(np.abs(qp.values[inside] - twice_dv[inside])) / gate)

# both saddles with one quiescent node are gates of equal height
for label in ("QS", "SQ"):
    print(label, sample_field(qp, eqs[label].position), "analytic", gate)
