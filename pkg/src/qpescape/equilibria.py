"""Equilibria of the (planar) drift, their stability, and continuation in beta.

Branches are followed by natural-parameter continuation with a tangent
predictor and Newton corrector.  When Newton can no longer follow a branch the
step is halved until it underflows; if the Jacobian is singular there the
branch is declared folded and the fold point is polished on the extended
system ``{drift = 0, det J = 0}``.
"""
from __future__ import annotations

import csv
import functools
import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import optimize

from .model import NetworkDrift, label_of

log = logging.getLogger(__name__)

DEFAULT_DOMAIN = ((-0.6, 1.4), (-0.6, 1.4))
HYPERBOLICITY_TOL = 1e-8
ROOT_TOL = 1e-10
MERGE_RADIUS = 1e-6


@dataclass
class Equilibrium:
    position: np.ndarray
    eigenvalues: np.ndarray
    stability: str
    label: Optional[str] = None

    def __repr__(self):
        pos = ", ".join(f"{v:.6g}" for v in self.position)
        return f"Equilibrium({self.label or '?'}: ({pos}), {self.stability})"


@dataclass
class BifurcationPoint:
    beta: float
    kind: str  # "saddle-node" | "transcritical"
    participants: tuple
    position: Optional[np.ndarray] = None


@dataclass
class ContinuationBranch:
    label: Optional[str]
    betas: np.ndarray
    positions: np.ndarray
    eigenvalues: np.ndarray
    terminated_by: Optional[str] = None  # None | "fold" | "domain-exit" | "failure"
    end_beta: Optional[float] = None

    @property
    def states(self) -> list:
        return [Equilibrium(p, ev, stability_of(ev), self.label)
                for p, ev in zip(self.positions, self.eigenvalues)]

    def position_at(self, beta: float) -> np.ndarray:
        """Linear interpolation of the branch position (no extrapolation)."""
        if not self.betas[0] - 1e-12 <= beta <= self.betas[-1] + 1e-12:
            raise ValueError(f"beta={beta} outside branch {self.label} range "
                             f"[{self.betas[0]}, {self.betas[-1]}]")
        return np.array([np.interp(beta, self.betas, c) for c in self.positions.T])


@dataclass
class BifurcationDiagram:
    network: NetworkDrift
    branches: list
    bifurcations: list = field(default_factory=list)

    def branch(self, label: str) -> ContinuationBranch:
        for b in self.branches:
            if b.label == label:
                return b
        raise KeyError(label)

    def eliminated_by(self, label: str) -> Optional[BifurcationPoint]:
        """The bifurcation that ends branch ``label``, if any."""
        for bp in self.bifurcations:
            if bp.kind == "saddle-node" and label in bp.participants:
                return bp
        return None


# -- basic numerics -------------------------------------------------------------

def stability_of(eigenvalues, tol: float = HYPERBOLICITY_TOL) -> str:
    re = np.real(eigenvalues)
    if np.any(np.abs(re) < tol):
        return "nonhyperbolic"
    if np.all(re < 0):
        return "sink"
    if np.all(re > 0):
        return "source"
    return "saddle"


def classify(position, network: NetworkDrift, tol: float = HYPERBOLICITY_TOL):
    """Stability class and Jacobian eigenvalues at ``position``."""
    ev = np.linalg.eigvals(network.jacobian(position))
    ev = ev[np.lexsort((ev.imag, ev.real))]
    return stability_of(ev, tol), ev


def newton(network: NetworkDrift, x0, tol: float = 1e-13, maxiter: int = 40):
    """Plain Newton iteration.  Returns ``(x, converged)``."""
    x = np.array(x0, dtype=float)
    for _ in range(maxiter):
        F = network.drift(x)
        if not np.all(np.isfinite(F)):
            return x, False
        try:
            dx = np.linalg.solve(network.jacobian(x), F)
        except np.linalg.LinAlgError:
            return x, False
        x = x - dx
        if np.max(np.abs(dx)) < tol * (1 + np.max(np.abs(x))):
            break
    res = np.max(np.abs(network.drift(x)))
    return x, bool(np.isfinite(res) and res <= ROOT_TOL)


def _beta_derivative(network: NetworkDrift, x) -> np.ndarray:
    # drift is affine in beta; d/dbeta = unit-beta coupling term
    M, b = network.with_beta(1.0).linear_part()
    return M @ x + b


def find_equilibria(network: NetworkDrift, domain=DEFAULT_DOMAIN, seed_density: int = 41,
                    merge_radius: float = MERGE_RADIUS, maxiter: int = 60) -> list:
    """All equilibria reachable by Newton from a lattice of seeds in ``domain``.

    ``domain`` holds one ``(lo, hi)`` interval per evolving node; a single
    interval is broadcast.
    """
    d = network.dim
    if len(domain) != d:
        domain = (tuple(domain[0]),) * d
    axes = [np.linspace(lo, hi, seed_density) for lo, hi in domain]
    X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    with np.errstate(all="ignore"):
        for _ in range(maxiter):
            J = network.jacobian(X)
            F = network.drift(X)
            ok = np.abs(np.linalg.det(J)) > 1e-14
            dx = np.zeros_like(X)
            dx[ok] = np.linalg.solve(J[ok], F[ok][..., None])[..., 0]
            X = X - dx
            X[~np.isfinite(X)] = np.nan
        res = np.nanmax(np.abs(network.drift(X)), axis=-1)
    lo = np.array([a for a, _ in domain])
    hi = np.array([b for _, b in domain])
    good = np.isfinite(res) & (res <= ROOT_TOL) & np.all((X >= lo) & (X <= hi), axis=-1)
    n_fail = int(np.count_nonzero(~np.isfinite(res) | (res > ROOT_TOL)))
    if n_fail:
        log.debug("find_equilibria: %d of %d seeds did not converge", n_fail, len(X))

    roots = []
    for x in X[good]:
        x, _ = newton(network, x)
        if all(np.max(np.abs(x - r)) > merge_radius for r in roots):
            roots.append(x)
    roots.sort(key=lambda r: tuple(r))
    out = []
    for r in roots:
        stab, ev = classify(r, network)
        out.append(Equilibrium(r, ev, stab, label_of(network, r)))
    return out


# -- continuation -------------------------------------------------------------------

def _polish_fold(network: NetworkDrift, x, beta):
    """Solve ``drift = 0, det J = 0`` for ``(x, beta)`` starting near a fold."""
    def F(z):
        net = network.with_beta(max(z[-1], 0.0))
        xx = z[:-1]
        return np.concatenate([net.drift(xx), [np.linalg.det(net.jacobian(xx))]])

    z, info, ier, _ = optimize.fsolve(F, np.concatenate([x, [beta]]), full_output=True,
                                      xtol=1e-14)
    if ier == 1 and abs(z[-1] - beta) < 1e-5 and np.max(np.abs(z[:-1] - x)) < 1e-2:
        return z[:-1], float(z[-1]), True
    return np.asarray(x), float(beta), False


def continue_branch(start: Equilibrium, network: NetworkDrift, beta_range,
                    step: float = 1e-3, min_step: float = 1e-11, max_dx: float = 0.02,
                    domain=DEFAULT_DOMAIN, fold_tol: float = 1e-3) -> ContinuationBranch:
    """Follow ``start`` (an equilibrium at ``beta_range[0]``) up to ``beta_range[1]``.

    Returns a :class:`ContinuationBranch`.  Termination reasons: ``"fold"`` when
    the step underflows at a (near) singular Jacobian, ``"domain-exit"`` when
    the branch leaves ``domain``, ``"failure"`` otherwise.
    """
    b0, b1 = map(float, beta_range)
    d = network.dim
    if len(domain) != d:
        domain = (tuple(domain[0]),) * d
    lo = np.array([a for a, _ in domain])
    hi = np.array([b for _, b in domain])

    x, ok = newton(network.with_beta(b0), start.position)
    if not ok:
        raise ValueError(f"start {start!r} is not an equilibrium at beta={b0}")
    betas, xs, evs = [b0], [x], [classify(x, network.with_beta(b0))[1]]
    beta, h = b0, step
    terminated = None
    while beta < b1 - 1e-15:
        h = min(h, b1 - beta)
        if len(betas) > 1:
            # secant stays on the branch through transcritical points, where J is singular
            tangent = (x - xs[-2]) / (beta - betas[-2])
        else:
            net = network.with_beta(beta)
            try:
                tangent = -np.linalg.solve(net.jacobian(x), _beta_derivative(net, x))
            except np.linalg.LinAlgError:
                tangent = np.zeros(d)
        xp = x + h * tangent
        xn, ok = newton(network.with_beta(beta + h), xp)
        move = np.max(np.abs(xn - x))
        if ok and move <= max_dx and np.max(np.abs(xn - xp)) <= 0.5 * move + 1e-10:
            if np.any(xn < lo) or np.any(xn > hi):
                terminated = "domain-exit"
                break
            beta += h
            x = xn
            betas.append(beta)
            xs.append(x)
            evs.append(classify(x, network.with_beta(beta))[1])
            h = min(step, 2 * h)
            continue
        h *= 0.5
        if h < min_step:
            ev = classify(x, network.with_beta(beta))[1]
            fold = _polish_fold(network, x, beta)
            if fold[2] or np.min(np.abs(ev.real)) < fold_tol:
                terminated = "fold"
            else:
                terminated = "failure"
            break

    branch = ContinuationBranch(start.label, np.array(betas), np.array(xs), np.array(evs),
                                terminated, betas[-1])
    if terminated == "fold":
        xf, bf, _ = fold
        branch.end_beta = bf
        keep = branch.betas < bf
        branch.betas = np.append(branch.betas[keep], bf)
        branch.positions = np.vstack([branch.positions[keep], xf])
        branch.eigenvalues = np.vstack(
            [branch.eigenvalues[keep], classify(xf, network.with_beta(bf))[1]])
    return branch


def _critical_eigenvalue(x, network):
    ev = np.linalg.eigvals(network.jacobian(x)).real
    return ev[np.argmin(np.abs(ev))]


def _refine_crossing(network, branch, lo, hi, iters=60):
    """Bisect on the sign of the near-zero eigenvalue along ``branch``."""
    def sign_at(beta):
        x, ok = newton(network.with_beta(beta), branch.position_at(beta))
        return np.sign(_critical_eigenvalue(x, network.with_beta(beta))), x

    s_lo, _ = sign_at(lo)
    x = branch.position_at(hi)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        s, x = sign_at(mid)
        if s == s_lo:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-12:
            break
    return 0.5 * (lo + hi), x


def detect_bifurcations(branches: Sequence[ContinuationBranch], network: NetworkDrift = None,
                        beta_tol: float = 1e-5, pos_tol: float = 1e-3,
                        cross_tol: float = 1e-4) -> list:
    """Saddle-nodes from paired folds; transcriticals from crossing branches.

    ``network`` (any beta) is needed to refine transcritical crossings; without
    it the crossing is located from the branch samples only.
    """
    out = []
    folds = [b for b in branches if b.terminated_by == "fold"]
    used = set()
    for i, a in enumerate(folds):
        if i in used:
            continue
        partner = None
        for j in range(i + 1, len(folds)):
            if j in used:
                continue
            b = folds[j]
            if (abs(a.end_beta - b.end_beta) < beta_tol
                    and np.max(np.abs(a.positions[-1] - b.positions[-1])) < pos_tol):
                partner = j
                break
        if partner is None:
            warnings.warn(f"fold of branch {a.label} at beta={a.end_beta:.6g} has no partner")
            out.append(BifurcationPoint(a.end_beta, "saddle-node", (a.label,), a.positions[-1]))
            continue
        used.update((i, partner))
        b = folds[partner]
        pair = tuple(sorted((a.label, b.label)))
        out.append(BifurcationPoint(0.5 * (a.end_beta + b.end_beta), "saddle-node", pair,
                                    0.5 * (a.positions[-1] + b.positions[-1])))

    for i, a in enumerate(branches):
        for b in branches[i + 1:]:
            lo = max(a.betas[0], b.betas[0])
            hi = min(a.betas[-1], b.betas[-1])
            if hi <= lo:
                continue
            grid = np.union1d(a.betas, b.betas)
            grid = grid[(grid >= lo) & (grid <= hi)]
            if len(grid) < 3:
                continue
            da = np.stack([np.interp(grid, a.betas, c) for c in a.positions.T], axis=-1)
            db = np.stack([np.interp(grid, b.betas, c) for c in b.positions.T], axis=-1)
            # closest approach of the linear interpolants within each sample interval
            dd = da - db
            s = np.linspace(0.0, 1.0, 21)[None, :, None]
            seg = dd[:-1, None, :] + s * (dd[1:] - dd[:-1])[:, None, :]
            seg_min = np.max(np.abs(seg), axis=-1)
            dist = np.max(np.abs(dd), axis=-1)
            j = np.argmin(seg_min, axis=1)
            dist[:-1] = np.minimum(dist[:-1], np.where(j < 10, seg_min.min(axis=1), np.inf))
            dist[1:] = np.minimum(dist[1:], np.where(j >= 10, seg_min.min(axis=1), np.inf))
            ea = np.array([np.interp(grid, a.betas, a.eigenvalues[:, k].real)
                           for k in range(a.eigenvalues.shape[1])]).T
            # ends of a fold are not crossings
            k = int(np.argmin(dist))
            if dist[k] > cross_tol or k in (0, len(grid) - 1):
                continue
            if a.terminated_by == "fold" and abs(grid[k] - a.end_beta) < 1e-3:
                continue
            if b.terminated_by == "fold" and abs(grid[k] - b.end_beta) < 1e-3:
                continue
            kl, kr = max(k - 2, 0), min(k + 2, len(grid) - 1)
            crit = np.argmin(np.abs(ea[k]))
            if np.sign(ea[kl, crit]) == np.sign(ea[kr, crit]):
                continue
            if network is not None:
                beta_c, x_c = _refine_crossing(network, a, grid[kl], grid[kr])
            else:
                beta_c, x_c = grid[k], da[k]
            out.append(BifurcationPoint(float(beta_c), "transcritical",
                                        tuple(sorted((a.label, b.label))), x_c))
    out.sort(key=lambda p: p.beta)
    return out


def exchange_labels(branches: list, bifurcations: list) -> list:
    """Swap branch tails at each transcritical point.

    Stabilities are exchanged at a transcritical crossing, so the state that
    carries a label (e.g. ``SS``) continues along the other geometric branch.
    """
    by_label = {b.label: b for b in branches}
    for bp in bifurcations:
        if bp.kind != "transcritical":
            continue
        la, lb = bp.participants
        a, b = by_label[la], by_label[lb]
        ka = a.betas > bp.beta
        kb = b.betas > bp.beta
        new_a = ContinuationBranch(la, np.concatenate([a.betas[~ka], b.betas[kb]]),
                                   np.vstack([a.positions[~ka], b.positions[kb]]),
                                   np.vstack([a.eigenvalues[~ka], b.eigenvalues[kb]]),
                                   b.terminated_by, b.end_beta)
        new_b = ContinuationBranch(lb, np.concatenate([b.betas[~kb], a.betas[ka]]),
                                   np.vstack([b.positions[~kb], a.positions[ka]]),
                                   np.vstack([b.eigenvalues[~kb], a.eigenvalues[ka]]),
                                   a.terminated_by, a.end_beta)
        by_label[la], by_label[lb] = new_a, new_b
    return [by_label[b.label] for b in branches]


def _relabel_bifurcations(bifurcations, branches):
    """Participants of folds follow the exchanged labels."""
    out = []
    for bp in bifurcations:
        if bp.kind == "saddle-node":
            labels = []
            for br in branches:
                if (br.terminated_by == "fold" and abs(br.end_beta - bp.beta) < 1e-5
                        and np.max(np.abs(br.positions[-1] - bp.position)) < 1e-3):
                    labels.append(br.label)
            if labels:
                bp = BifurcationPoint(bp.beta, bp.kind, tuple(sorted(labels)), bp.position)
        out.append(bp)
    return out


@functools.lru_cache(maxsize=64)
def bifurcation_diagram(network: NetworkDrift, beta_max: float = 0.5, step: float = 1e-3,
                        domain=DEFAULT_DOMAIN) -> BifurcationDiagram:
    """Continue every beta = 0 equilibrium of ``network`` up to ``beta_max``.

    Labels are the nearest uncoupled states at beta = 0 and are exchanged at
    transcritical crossings.  The result is cached (networks are immutable).
    """
    net0 = network.with_beta(0.0)
    starts = find_equilibria(net0, domain)
    branches = []
    for eq in starts:
        if beta_max > 0:
            branches.append(continue_branch(eq, net0, (0.0, beta_max), step, domain=domain))
        else:
            branches.append(ContinuationBranch(eq.label, np.array([0.0]), eq.position[None],
                                               eq.eigenvalues[None], None, 0.0))
    bifs = detect_bifurcations(branches, net0)
    branches = exchange_labels(branches, bifs)
    bifs = _relabel_bifurcations(bifs, branches)
    return BifurcationDiagram(network, branches, bifs)


def equilibria_at(network: NetworkDrift, beta: Optional[float] = None,
                  diagram: Optional[BifurcationDiagram] = None,
                  beta_max: float = 0.5) -> dict:
    """Labelled equilibria at ``beta`` (default: the network's own beta).

    Returns ``{label: Equilibrium}`` for every branch that survives to beta.
    """
    beta = network.beta if beta is None else float(beta)
    if diagram is None:
        diagram = bifurcation_diagram(network.with_beta(0.0), max(beta_max, beta))
    net = network.with_beta(beta)
    out = {}
    for br in diagram.branches:
        if not br.betas[0] <= beta <= br.betas[-1] + 1e-15:
            continue
        x, ok = newton(net, br.position_at(min(beta, br.betas[-1])))
        if not ok:
            continue
        stab, ev = classify(x, net)
        out[br.label] = Equilibrium(x, ev, stab, br.label)
    return out


# -- export -----------------------------------------------------------------------

def write_branches_csv(path, branches):
    with open(path, "w", newline="") as fh:
        fh.write("# qpescape-schema: branches v1\n")
        w = csv.writer(fh)
        d = branches[0].positions.shape[1] if branches else 2
        w.writerow(["label", "beta"] + [f"x{i + 1}" for i in range(d)] + ["stability"]
                   + [f"re_lambda{i + 1}" for i in range(d)])
        for br in branches:
            for beta, x, ev in zip(br.betas, br.positions, br.eigenvalues):
                w.writerow([br.label, repr(float(beta))] + [repr(float(v)) for v in x]
                           + [stability_of(ev)] + [repr(float(v)) for v in ev.real])


def write_bifurcations_csv(path, bifurcations):
    with open(path, "w", newline="") as fh:
        fh.write("# qpescape-schema: bifurcations v1\n")
        w = csv.writer(fh)
        w.writerow(["kind", "beta", "participants"])
        for bp in bifurcations:
            w.writerow([bp.kind, repr(float(bp.beta)), "/".join(bp.participants)])
