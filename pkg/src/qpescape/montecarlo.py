"""Stochastic Heun ensembles of the coupled network and escape/return statistics.

Each node runs a two-state automaton with a hysteresis band ``[xi', xi]``: an
upward crossing of ``xi`` is an escape (event ``+i``, nodes numbered from 1),
a later downward crossing of ``xi'`` is a return (``-i``) and re-arms the node.
A realisation completes the first time every node is in the escaped state.

Node ``i`` of realisation ``k`` draws its noise from a Philox stream keyed by
``(master_seed, k, i)``, so an ensemble is reproducible and independent of
execution order.
"""
from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numba import njit

from .model import NetworkDrift

CHUNK = 1 << 15
EVENT_BUFFER = 256
_RUNNING, _COMPLETE, _TIMEOUT, _FULL = 0, 1, 2, 3


@dataclass(frozen=True)
class SimConfig:
    network: NetworkDrift
    dt: float = 1e-3
    xi: Optional[float] = None  # default: midway between x_S and x_A
    xi_prime: Optional[float] = None  # default: midway between x_Q and x_S
    n_realisations: int = 2000
    t_max: float = 1e5
    master_seed: int = 0

    def __post_init__(self):
        if self.network.frozen:
            raise ValueError("simulations need a network without frozen nodes")
        st = self.network.states
        if self.xi is None:
            object.__setattr__(self, "xi", 0.5 * (st.x_S + st.x_A))
        if self.xi_prime is None:
            object.__setattr__(self, "xi_prime", 0.5 * (st.x_Q + st.x_S))
        if not st.x_S < self.xi <= st.x_A:
            raise ValueError(f"xi={self.xi} must satisfy x_S < xi <= x_A")
        if not st.x_Q <= self.xi_prime < st.x_S:
            raise ValueError(f"xi'={self.xi_prime} must satisfy x_Q <= xi' < x_S")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.n_realisations < 1:
            raise ValueError("need at least one realisation")

    def to_dict(self) -> dict:
        return {"model": self.network.to_dict(), "dt": self.dt, "xi": self.xi,
                "xi_prime": self.xi_prime, "n_realisations": self.n_realisations,
                "t_max": self.t_max, "master_seed": self.master_seed}


@dataclass
class EscapeRecord:
    realisation: int
    events: list  # [(time, signed node id)]
    n_nodes: int
    completion_time: Optional[float] = None
    completed: bool = False

    @property
    def sequence(self) -> tuple:
        return tuple(e for _, e in self.events)

    @property
    def first_escape_times(self) -> np.ndarray:
        """Per-node time of the first escape (NaN if the node never escaped)."""
        out = np.full(self.n_nodes, np.nan)
        for t, e in self.events:
            if e > 0 and np.isnan(out[e - 1]):
                out[e - 1] = t
        return out

    @property
    def n_returns(self) -> int:
        return sum(1 for _, e in self.events if e < 0)


@dataclass
class StatsSummary:
    n_realisations: int
    n_completed: int
    mean_first_star: Optional[float]
    mean_first: Optional[float]
    mean_second_star: Optional[float]
    mean_second: Optional[float]
    return_percentage: Optional[float]
    first_direction: np.ndarray
    final_direction: np.ndarray
    first_transition: dict
    sequence_histogram: dict
    mean_returns: Optional[float] = None
    ci95: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema": "qpescape.mc-summary/1",
            "n_realisations": self.n_realisations,
            "n_completed": self.n_completed,
            "n_incomplete": self.n_realisations - self.n_completed,
            "incomplete_policy": "excluded from all time means and probabilities",
            "mean_first_star": self.mean_first_star,
            "mean_first": self.mean_first,
            "mean_second_star": self.mean_second_star,
            "mean_second": self.mean_second,
            "return_percentage": self.return_percentage,
            "mean_returns": self.mean_returns,
            "first_direction": self.first_direction.tolist(),
            "final_direction": self.final_direction.tolist(),
            "first_transition": {str(k): v for k, v in self.first_transition.items()},
            "sequence_histogram": {" ".join(map(str, k)): v
                                   for k, v in self.sequence_histogram.items()},
            "ci95_half_width": self.ci95,
        }


# -- single step and the event automaton -----------------------------------------

def heun_step(x, network: NetworkDrift, dt: float, noise) -> np.ndarray:
    """One stochastic Heun step; the same noise increment is used in both stages."""
    x = np.asarray(x, dtype=float)
    kick = network.alpha * math.sqrt(dt) * np.asarray(noise, dtype=float)
    f0 = network.drift(x)
    xt = x + f0 * dt + kick
    return x + 0.5 * (f0 + network.drift(xt)) * dt + kick


def detect_events(trajectory, xi: float, xi_prime: float, times=None,
                  realisation: int = 0) -> EscapeRecord:
    """Run the crossing automaton over a sampled trajectory of shape ``(T, n)``.

    Nodes already above ``xi`` in the first sample count as escaped at that time.
    Processing stops at completion.
    """
    traj = np.atleast_2d(np.asarray(trajectory, dtype=float))
    if traj.shape[0] == 1 and np.ndim(trajectory) == 1:
        traj = traj.T
    T, n = traj.shape
    times = np.arange(T, dtype=float) if times is None else np.asarray(times, dtype=float)
    above = np.zeros(n, dtype=bool)
    events = []
    for k in range(T):
        for i in range(n):
            v = traj[k, i]
            if not above[i] and v > xi:
                above[i] = True
                events.append((float(times[k]), i + 1))
            elif above[i] and v < xi_prime:
                above[i] = False
                events.append((float(times[k]), -(i + 1)))
        if above.all():
            return EscapeRecord(realisation, events, n, float(times[k]), True)
    return EscapeRecord(realisation, events, n, None, False)


# -- ensemble kernel ----------------------------------------------------------------

@njit(cache=True)
def _simulate_chunk(x, above, step0, dt, sq, nu, M, noise, xi, xip, max_steps,
                    ev_t, ev_id, path, record):
    """Advance through the rows of ``noise``; stop early on completion, timeout or
    a nearly full event buffer.  Returns (status, step, n_events, rows_used)."""
    n = x.shape[0]
    f0 = np.empty(n)
    f1 = np.empty(n)
    xt = np.empty(n)
    step = step0
    n_ev = 0
    cap = ev_t.shape[0] - n
    for k in range(noise.shape[0]):
        for i in range(n):
            s = -(x[i] - 1.0) * (x[i] * x[i] - nu)
            for j in range(n):
                s += M[i, j] * x[j]
            f0[i] = s
        for i in range(n):
            xt[i] = x[i] + f0[i] * dt + sq * noise[k, i]
        for i in range(n):
            s = -(xt[i] - 1.0) * (xt[i] * xt[i] - nu)
            for j in range(n):
                s += M[i, j] * xt[j]
            f1[i] = s
        for i in range(n):
            x[i] = x[i] + 0.5 * (f0[i] + f1[i]) * dt + sq * noise[k, i]
        if record:
            for i in range(n):
                path[k, i] = x[i]
        step += 1
        t = step * dt
        n_up = 0
        for i in range(n):
            if not above[i] and x[i] > xi:
                above[i] = True
                ev_t[n_ev] = t
                ev_id[n_ev] = i + 1
                n_ev += 1
            elif above[i] and x[i] < xip:
                above[i] = False
                ev_t[n_ev] = t
                ev_id[n_ev] = -(i + 1)
                n_ev += 1
            if above[i]:
                n_up += 1
        if n_up == n:
            return _COMPLETE, step, n_ev, k + 1
        if step >= max_steps:
            return _TIMEOUT, step, n_ev, k + 1
        if n_ev >= cap:
            return _FULL, step, n_ev, k + 1
    return _RUNNING, step, n_ev, noise.shape[0]


def node_generator(master_seed: int, k: int, node: int) -> np.random.Generator:
    """Counter-based stream for node ``node`` of realisation ``k``."""
    ss = np.random.SeedSequence(master_seed, spawn_key=(k, node))
    return np.random.Generator(np.random.Philox(ss))


def simulate_realisation(config: SimConfig, initial, k: int, record_trajectory: bool = False):
    """Realisation ``k`` of ``config``.

    With ``record_trajectory`` the post-step states are returned as well, as
    ``(record, times, path)`` with the initial state in the first row.
    """
    net = config.network
    x = np.array(initial, dtype=float)
    if x.shape != (net.n_nodes,):
        raise ValueError(f"initial state must have {net.n_nodes} components")
    n = net.n_nodes
    M, _ = net.linear_part()
    gens = [node_generator(config.master_seed, k, i) for i in range(n)]
    above = x > config.xi
    events = [(0.0, i + 1) for i in range(n) if above[i]]
    sq = net.alpha * math.sqrt(config.dt)
    max_steps = max(1, int(math.ceil(config.t_max / config.dt - 1e-9)))
    ev_t = np.empty(max(EVENT_BUFFER, 2 * n))
    ev_id = np.empty(len(ev_t), dtype=np.int64)
    chunks = [x.copy()[None, :]] if record_trajectory else None
    path = np.empty((CHUNK if record_trajectory else 1, n))
    noise = np.empty((CHUNK, n))
    step, status = 0, _COMPLETE if above.all() else _RUNNING
    while status in (_RUNNING, _FULL):
        if status == _RUNNING:
            for i, g in enumerate(gens):
                noise[:, i] = g.standard_normal(CHUNK)
            pos = 0
        status, step, n_ev, used = _simulate_chunk(
            x, above, step, config.dt, sq, net.nu, M, noise[pos:], config.xi,
            config.xi_prime, max_steps, ev_t, ev_id, path, record_trajectory)
        events.extend(zip(ev_t[:n_ev].tolist(), ev_id[:n_ev].tolist()))
        if record_trajectory:
            chunks.append(path[:used].copy())
        pos += used
        if status == _FULL and pos == CHUNK:
            status = _RUNNING
    done = status == _COMPLETE
    rec = EscapeRecord(k, events, n, events[-1][0] if done else None, done)
    if record_trajectory:
        traj = np.concatenate(chunks)
        return rec, np.arange(len(traj)) * config.dt, traj
    return rec


def _run_range(config, initial, ks):
    return [simulate_realisation(config, initial, k) for k in ks]


def run_ensemble(config: SimConfig, initial=None, jobs: int = 1) -> list:
    """``config.n_realisations`` independent records, ordered by realisation index.

    ``initial`` defaults to every node at ``x_Q``.  With ``jobs > 1`` the
    realisations are spread over worker processes; the result is identical.
    """
    net = config.network
    if initial is None:
        initial = np.full(net.n_nodes, net.states.x_Q)
    ks = range(config.n_realisations)
    if jobs <= 1:
        return _run_range(config, initial, ks)
    from concurrent.futures import ProcessPoolExecutor
    parts = [list(ks[j::jobs]) for j in range(jobs)]
    with ProcessPoolExecutor(jobs) as ex:
        out = [r for part in ex.map(_run_range, [config] * jobs, [initial] * jobs, parts)
               for r in part]
    return sorted(out, key=lambda r: r.realisation)


# -- statistics -------------------------------------------------------------------------

def final_order(sequence) -> tuple:
    """Cancel each return against the escape it undoes: ``(1,-1,3,2,1) -> (3,2,1)``."""
    out = []
    for e in sequence:
        if e > 0:
            out.append(e)
        else:
            idx = len(out) - 1 - out[::-1].index(-e)
            del out[idx]
    return tuple(out)


def _departures(record: EscapeRecord):
    """Times and node ids of escapes that leave the all-quiescent state."""
    up = set()
    out = []
    for t, e in record.events:
        if e > 0:
            if not up:
                out.append((t, e))
            up.add(e)
        else:
            up.discard(-e)
    return out


def _ci(p, n):
    return 1.96 * math.sqrt(p * (1 - p) / n) if n else None


def summarize(records, n_nodes: Optional[int] = None) -> StatsSummary:
    """Aggregate an ensemble.  Time means use completed realisations only.

    first*  : time of the very first escape
    first   : time of the last departure from the all-quiescent state
    second* : completion time minus the last departure (the leg that never
              revisits the all-quiescent state)
    second  : completion time minus the very first escape (includes returns)
    """
    records = sorted(records, key=lambda r: r.realisation)
    if not records:
        raise ValueError("no records to summarize")
    n_nodes = n_nodes or records[0].n_nodes
    done = [r for r in records if r.completed]
    nc = len(done)

    def mean(vals):
        return float(np.mean(vals)) if len(vals) else None

    first_star, first, second_star, second = [], [], [], []
    first_dir = np.zeros(n_nodes)
    final_dir = np.zeros(n_nodes)
    first_transition = Counter()
    seqs = Counter()
    n_ret = 0
    for r in done:
        deps = _departures(r)
        t_first, id_first = next((t, e) for t, e in r.events if e > 0)
        t_last, id_last = deps[-1]
        first_star.append(t_first)
        first.append(t_last)
        second_star.append(r.completion_time - t_last)
        second.append(r.completion_time - t_first)
        first_dir[id_first - 1] += 1
        final_dir[id_last - 1] += 1
        moved = [e for t, e in r.events if t > 0]
        if moved:
            first_transition[moved[0]] += 1
        seqs[r.sequence] += 1
        n_ret += r.n_returns > 0
    if nc:
        first_dir /= nc
        final_dir /= nc
    n_trans = sum(first_transition.values())
    ret = 100.0 * n_ret / nc if nc else None
    ci = {
        "return_percentage": None if not nc else 100 * _ci(n_ret / nc, nc),
        "first_direction": [_ci(p, nc) for p in first_dir],
        "final_direction": [_ci(p, nc) for p in final_dir],
    }
    return StatsSummary(
        n_realisations=len(records), n_completed=nc,
        mean_first_star=mean(first_star), mean_first=mean(first),
        mean_second_star=mean(second_star), mean_second=mean(second),
        return_percentage=ret,
        first_direction=first_dir, final_direction=final_dir,
        first_transition={k: v / n_trans for k, v in sorted(first_transition.items())},
        sequence_histogram={k: v / nc for k, v in seqs.most_common()},
        mean_returns=mean([r.n_returns for r in done]),
        ci95=ci,
    )


def write_records_csv(path, records):
    with open(path, "w", newline="") as fh:
        fh.write("# qpescape-schema: records v1\n")
        w = csv.writer(fh)
        w.writerow(["realisation", "event", "time", "node", "completed"])
        for r in records:
            for k, (t, e) in enumerate(r.events):
                w.writerow([r.realisation, k, repr(t), e, int(r.completed)])


def write_summary_json(path, summary: StatsSummary, config: Optional[SimConfig] = None):
    doc = summary.to_dict()
    if config is not None:
        doc["config"] = config.to_dict()
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
