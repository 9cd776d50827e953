"""Monte Carlo escape statistics: directions, returns and the domino order.

Run: python demos/03_escape_statistics.py   (a couple of minutes)
"""
from qpescape import SimConfig, run_ensemble, summarize, three_node_chain, two_node
from qpescape.montecarlo import final_order

# two nodes: the driven node rarely escapes first once coupling is on
for beta in (0.0, 0.1, 0.19):
    s = summarize(run_ensemble(SimConfig(two_node(beta), n_realisations=1000, master_seed=1)))
    print(f"beta={beta:.2f}  P(final escape via x2)={s.final_direction[1]:.3f}  "
          f"returns={s.return_percentage:.2f}%  first*={s.mean_first_star:.1f}  "
          f"second*={s.mean_second_star:.1f}")

# three-node chain 3 -> 2 -> 1: the driver usually goes first
s = summarize(run_ensemble(SimConfig(three_node_chain(0.17), n_realisations=2000, master_seed=2)))
for seq, p in list(s.sequence_histogram.items())[:6]:
    print(f"{str(seq):22s} {p:.4f}   final order {final_order(seq)}")
