"""Quasipotentials, gate heights and escape statistics for networks of coupled
bistable nodes."""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from .equilibria import (BifurcationDiagram, BifurcationPoint, ContinuationBranch, Equilibrium,
                         bifurcation_diagram, classify, continue_branch, detect_bifurcations,
                         equilibria_at, find_equilibria)
from .gates import (GateReport, GateScan, NoGateError, basin_saddles, escape_time_estimate,
                    gate_bifurcation_scan, gate_heights)
from .model import (ModelParams, NetworkDrift, NodeStates, node_drift, potential_uncoupled,
                    preset, single_node, three_node_chain, three_node_slice, two_node)
from .montecarlo import (EscapeRecord, SimConfig, StatsSummary, detect_events, final_order,
                         heun_step, run_ensemble, simulate_realisation, summarize)
from .quasipotential import (Grid2D, QPField, SolverError, SolverParams, action_of_path,
                             descend_path, extract_contours, geometric_action_segment,
                             load_field, sample_field, save_field, solve)

__all__ = [n for n in dir() if not n.startswith("_") and n not in ("version",
                                                                    "PackageNotFoundError")]
