"""Gate heights, gate-height bifurcation scans and escape-time estimates."""
from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.integrate import solve_ivp

from .equilibria import Equilibrium, bifurcation_diagram, equilibria_at
from .model import NetworkDrift
from .quasipotential import (DOMAIN_ACTIVE, DOMAIN_QS, Grid2D, QPField, SolverParams,
                             sample_field, solve)

log = logging.getLogger(__name__)

#: Participants closer than this to their fold partner are not evaluated.
SEPARATION_MIN = 1e-3


class NoGateError(RuntimeError):
    pass


@dataclass
class GateReport:
    beta: float
    anchor_label: Optional[str]
    heights: dict  # label -> float or None (unreachable)
    gate: Optional[str]

    def rows(self):
        for label, h in self.heights.items():
            yield (self.beta, self.anchor_label, label, h, label == self.gate)


@dataclass
class GateScan:
    betas: list
    reports: list
    pair: tuple
    anchor_label: str
    crossing: Optional[float] = None
    bracket: Optional[tuple] = None
    beta_range: tuple = ()
    truncated: Optional[str] = None
    grid: Optional[Grid2D] = None
    params: SolverParams = field(default_factory=SolverParams)

    def differences(self) -> np.ndarray:
        a, b = self.pair
        return np.array([np.nan if r.heights.get(a) is None or r.heights.get(b) is None
                         else r.heights[a] - r.heights[b] for r in self.reports])

    def summary(self) -> dict:
        g = self.grid
        return {
            "schema": "qpescape.gatescan/1",
            "anchor": self.anchor_label,
            "pair": list(self.pair),
            "beta_range": list(self.beta_range),
            "crossing": self.crossing,
            "bracket": list(self.bracket) if self.bracket else None,
            "result": "crossing" if self.crossing is not None else "no crossing",
            "truncated": self.truncated,
            "grid": None if g is None else {"x_range": g.x_range, "y_range": g.y_range,
                                            "nx": g.nx, "ny": g.ny},
            "solver": asdict(self.params),
            "samples": [{"beta": r.beta, "heights": r.heights, "gate": r.gate}
                        for r in self.reports],
        }


def gate_heights(qp: QPField, saddles) -> GateReport:
    """Quasipotential at each saddle; the gate is the lowest finite one.

    ``saddles`` is a list of :class:`Equilibrium` or a ``{label: Equilibrium}``.
    """
    items = saddles.items() if isinstance(saddles, dict) else [(s.label, s) for s in saddles]
    heights = {}
    for label, eq in items:
        pos = eq.position if isinstance(eq, Equilibrium) else np.asarray(eq)
        heights[label] = sample_field(qp, pos) if qp.grid.contains(pos) else None
    finite = {k: v for k, v in heights.items() if v is not None}
    if not finite:
        raise NoGateError("no saddle is reachable from the anchor")
    gate = min(finite, key=lambda k: (finite[k], k))
    return GateReport(qp.beta, qp.anchor_label, heights, gate)


def escape_time_estimate(gate_height: float, sigma: float) -> float:
    """Order-of-magnitude mean escape time ``exp(U*/sigma^2)``, without prefactor."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return math.exp(gate_height / sigma**2)


def default_grid(positions, n: int = 512) -> Grid2D:
    """Square window used by the figures: quiescent/saddle window unless an
    active coordinate is involved."""
    hi = max(np.max(p) for p in positions)
    lo, top = DOMAIN_QS if hi < DOMAIN_QS[1] - 0.05 else DOMAIN_ACTIVE
    return Grid2D.square(n, lo, top)


def basin_saddles(network: NetworkDrift, anchor_label: str, equilibria: dict = None,
                  t_end: float = 2000.0, eps: float = 1e-4) -> dict:
    """Saddles with an unstable-manifold branch that falls into the anchor.

    These are the saddles on the anchor's basin boundary and the gate candidates.
    """
    eqs = equilibria_at(network) if equilibria is None else equilibria
    anchor = eqs[anchor_label].position
    out = {}
    for label, eq in eqs.items():
        if eq.stability != "saddle":
            continue
        w, v = np.linalg.eig(network.jacobian(eq.position))
        u = np.real(v[:, np.argmax(w.real)])
        for sgn in (1, -1):
            sol = solve_ivp(lambda t, x: network.drift(x), (0, t_end),
                            eq.position + sgn * eps * u, rtol=1e-8, atol=1e-11)
            if np.max(np.abs(sol.y[:, -1] - anchor)) < 1e-3:
                out[label] = eq
                break
    return out


def _participant_limit(diagram, labels, lo, hi, n=2001):
    """Largest beta <= hi at which all participants exist and are separated from
    their fold partners by more than SEPARATION_MIN."""
    limit, reason = hi, None
    for label in labels:
        try:
            br = diagram.branch(label)
        except KeyError:
            raise ValueError(f"no equilibrium labelled {label!r}") from None
        if br.betas[0] > lo:
            raise ValueError(f"{label} does not exist at beta={lo}")
        end = br.betas[-1]
        bp = diagram.eliminated_by(label)
        if bp is not None and len(bp.participants) == 2:
            partner = diagram.branch([p for p in bp.participants if p != label][0])
            top = min(end, partner.betas[-1], hi)
            for b in np.linspace(lo, top, n):
                if np.max(np.abs(br.position_at(b) - partner.position_at(b))) <= SEPARATION_MIN:
                    if b < limit:
                        limit, reason = b, f"{label} eliminated at beta={bp.beta:.6g}"
                    break
        elif end < limit:
            limit, reason = end, f"{label} branch ends at beta={end:.6g}"
    return limit, reason


def _evaluate(network, beta, grid, params, anchor_label, pair, diagram=None):
    net = network.with_beta(beta)
    if diagram is None:
        diagram = bifurcation_diagram(network.with_beta(0.0), max(beta, 0.5))
    eqs = equilibria_at(net, beta, diagram)
    qp = solve(net, grid, eqs[anchor_label].position, params, anchor_label)
    rep = gate_heights(qp, {k: eqs[k] for k in pair})
    log.info("beta=%.6g heights=%s", beta, rep.heights)
    return rep


def gate_bifurcation_scan(network: NetworkDrift, beta_range, anchor_label: str = "AQ",
                          pair: Sequence[str] = ("SQ", "AS"), grid: Optional[Grid2D] = None,
                          tol_beta: float = 1e-3, n_coarse: int = 6,
                          params: SolverParams = SolverParams(),
                          coarse_grid: Optional[Grid2D] = None, n: int = 512,
                          jobs: int = 1) -> GateScan:
    """Locate where the heights of two saddles seen from ``anchor_label`` cross.

    A coarse scan over ``beta_range`` (run on ``jobs`` processes) is followed by
    bisection on the sign of ``height(pair[0]) - height(pair[1])``; every
    evaluation is a fresh solve.  The final estimate interpolates the difference
    linearly across the last bracket.
    """
    lo, hi = map(float, beta_range)
    pair = tuple(pair)
    diagram = bifurcation_diagram(network.with_beta(0.0), max(hi, 0.5))
    limit, reason = _participant_limit(diagram, (anchor_label,) + pair, lo, hi)
    truncated = None
    if limit < hi:
        truncated = reason
        warnings.warn(f"scan range truncated to beta < {limit:.6g}: {reason}")
        # stay clear of the limit itself
        hi = lo + 0.999 * (limit - lo)
    if grid is None:
        eqs = equilibria_at(network, lo, diagram)
        grid = default_grid([eqs[k].position for k in (anchor_label,) + pair], n)

    def evaluate(beta, g):
        return _evaluate(network, beta, g, params, anchor_label, pair, diagram)

    def diff(rep):
        a, b = (rep.heights[k] for k in pair)
        return np.nan if a is None or b is None else a - b

    cg = coarse_grid or grid
    betas = [float(b) for b in np.linspace(lo, hi, n_coarse)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(jobs) as ex:
            m = len(betas)
            reports = list(ex.map(_evaluate, [network] * m, betas, [cg] * m, [params] * m,
                                  [anchor_label] * m, [pair] * m))
    else:
        reports = [evaluate(b, cg) for b in betas]
    scan = GateScan(betas, reports, pair, anchor_label, beta_range=(lo, hi),
                    truncated=truncated, grid=grid, params=params)
    d = [diff(r) for r in reports]
    k = next((k for k in range(len(d) - 1)
              if np.isfinite(d[k]) and np.isfinite(d[k + 1]) and np.sign(d[k]) != np.sign(d[k + 1])),
             None)
    if k is None:
        return scan

    a, b = betas[k], betas[k + 1]
    da, db = d[k], d[k + 1]
    if cg is not grid:
        ra, rb = evaluate(a, grid), evaluate(b, grid)
        scan.betas += [a, b]
        scan.reports += [ra, rb]
        da, db = diff(ra), diff(rb)
        if not np.sign(da) != np.sign(db):
            warnings.warn("fine grid disagrees with the coarse bracket; no crossing reported")
            return scan
    while b - a > tol_beta:
        m = 0.5 * (a + b)
        r = evaluate(m, grid)
        scan.betas.append(m)
        scan.reports.append(r)
        dm = diff(r)
        if not np.isfinite(dm):
            warnings.warn(f"height difference undefined at beta={m:.6g}; bisection stopped")
            return scan
        if np.sign(dm) == np.sign(da):
            a, da = m, dm
        else:
            b, db = m, dm
    order = np.argsort(scan.betas)
    scan.betas = [scan.betas[i] for i in order]
    scan.reports = [scan.reports[i] for i in order]
    scan.bracket = (a, b)
    scan.crossing = float(a - da * (b - a) / (db - da))
    return scan


def write_gate_csv(path, reports):
    with open(path, "w", newline="") as fh:
        fh.write("# qpescape-schema: gates v1\n")
        w = csv.writer(fh)
        w.writerow(["beta", "anchor", "saddle", "height", "gate"])
        for rep in reports:
            for beta, anchor, label, h, is_gate in rep.rows():
                w.writerow([repr(float(beta)), anchor, label, "" if h is None else repr(h),
                            int(is_gate)])


def write_scan_json(path, scan: GateScan):
    with open(path, "w") as fh:
        json.dump(scan.summary(), fh, indent=2)
