"""Coupling moves the preferred exit from x_AQ from the AS gate to the SQ gate.

Run: python demos/02_gate_height_bifurcation.py   (about a minute)
"""
from qpescape import bifurcation_diagram, gate_bifurcation_scan, two_node

net = two_node()

# the noise-free bifurcations frame the interesting coupling range
for bp in bifurcation_diagram(net).bifurcations:
    print(f"{bp.kind:13s} beta={bp.beta:.5f}  {'/'.join(bp.participants)}")

# heights of the two saddles seen from x_AQ cross somewhere before x_AQ disappears
scan = gate_bifurcation_scan(net, (0.15, 0.20), anchor_label="AQ", pair=("SQ", "AS"), n=256)
for beta, rep in zip(scan.betas, scan.reports):
    print(f"beta={beta:.4f}  SQ={rep.heights['SQ']:.6f}  AS={rep.heights['AS']:.6f}  gate={rep.gate}")
print("gate-height bifurcation near beta =", round(scan.crossing, 4))
