"""Coupled bistable node dynamics.

Each node follows ``dx = f(x, nu) dt + alpha dw`` with the cubic

    f(x, nu) = -(x - 1)(x**2 - nu)

which has a quiescent sink ``x_Q = -sqrt(nu)``, a saddle ``x_S = sqrt(nu)`` and
an active sink ``x_A = 1``.  Nodes are coupled diffusively,
``beta * sum_{j in N_i} (x_j - x_i)``, along the directed edges of a
:class:`NetworkDrift`.  Some nodes may be frozen at a fixed value, which turns
e.g. the three-node chain into a planar slice.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

#: Baseline parameters used throughout unless overridden.
DEFAULT_NU = 0.01
DEFAULT_ALPHA = 0.05


def node_drift(x, nu):
    """Single-node drift ``-(x - 1)(x^2 - nu)``; works elementwise on arrays."""
    return -(x - 1.0) * (x * x - nu)


def node_drift_derivative(x, nu):
    """Derivative of :func:`node_drift` with respect to ``x``."""
    return -3.0 * x * x + 2.0 * x + nu


def potential_uncoupled(x1, x2, nu):
    """Potential of the uncoupled two-node system, ``f = -grad V`` when beta = 0."""
    return ((x1**4 + x2**4) / 4.0 - (x1**3 + x2**3) / 3.0
            - nu * (x1**2 + x2**2) / 2.0 + nu * (x1 + x2))


@dataclass(frozen=True)
class ModelParams:
    nu: float = DEFAULT_NU
    beta: float = 0.0
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        if not 0.0 < self.nu < 1.0:
            raise ValueError(f"nu must lie in (0, 1), got {self.nu}")
        if self.beta < 0.0:
            raise ValueError(f"beta must be non-negative, got {self.beta}")
        if self.alpha < 0.0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")


@dataclass(frozen=True)
class NodeStates:
    """The three equilibria of an isolated node."""

    x_Q: float
    x_S: float
    x_A: float

    @classmethod
    def from_nu(cls, nu: float) -> "NodeStates":
        r = math.sqrt(nu)
        return cls(-r, r, 1.0)

    def value(self, letter: str) -> float:
        return {"Q": self.x_Q, "S": self.x_S, "A": self.x_A}[letter]

    def letter(self, x: float) -> str:
        """Letter of the state nearest to ``x``."""
        vals = (self.x_Q, self.x_S, self.x_A)
        return "QSA"[int(np.argmin([abs(x - v) for v in vals]))]


@dataclass(frozen=True)
class NetworkDrift:
    """Drift field of a network of coupled bistable nodes.

    Parameters
    ----------
    n_nodes : int
        Total number of nodes, including frozen ones.
    edges : sequence of (source, target)
        Directed coupling; ``(j, i)`` puts ``j`` in the neighbour set of ``i``.
        Indices are zero-based.
    params : ModelParams
    frozen : mapping node index -> value
        Nodes held fixed.  They enter the coupling terms of their targets but
        are not part of the evolving state.
    """

    n_nodes: int
    edges: tuple = ()
    params: ModelParams = field(default_factory=ModelParams)
    frozen: tuple = ()

    def __post_init__(self):
        if self.n_nodes < 1:
            raise ValueError("n_nodes must be positive")
        edges = tuple((int(s), int(t)) for s, t in self.edges)
        for s, t in edges:
            if not (0 <= s < self.n_nodes and 0 <= t < self.n_nodes):
                raise ValueError(f"edge {(s, t)} references a missing node")
            if s == t:
                raise ValueError(f"self-loop {(s, t)} has no effect and is not allowed")
        frozen = self.frozen
        if isinstance(frozen, Mapping):
            frozen = frozen.items()
        frozen = tuple(sorted((int(k), float(v)) for k, v in frozen))
        for k, _ in frozen:
            if not 0 <= k < self.n_nodes:
                raise ValueError(f"frozen node {k} does not exist")
        if len(frozen) == self.n_nodes:
            raise ValueError("at least one node must evolve")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "frozen", frozen)

    # -- structure -----------------------------------------------------------

    @property
    def nu(self) -> float:
        return self.params.nu

    @property
    def beta(self) -> float:
        return self.params.beta

    @property
    def alpha(self) -> float:
        return self.params.alpha

    @property
    def states(self) -> NodeStates:
        return NodeStates.from_nu(self.params.nu)

    @property
    def evolving(self) -> tuple:
        fixed = {k for k, _ in self.frozen}
        return tuple(i for i in range(self.n_nodes) if i not in fixed)

    @property
    def dim(self) -> int:
        return len(self.evolving)

    def with_beta(self, beta: float) -> "NetworkDrift":
        return replace(self, params=replace(self.params, beta=float(beta)))

    def with_params(self, **kw) -> "NetworkDrift":
        return replace(self, params=replace(self.params, **kw))

    def laplacian(self) -> np.ndarray:
        """Coupling matrix ``C`` over all nodes with ``(C y)_i = sum_j (y_j - y_i)``."""
        C = np.zeros((self.n_nodes, self.n_nodes))
        for s, t in self.edges:
            C[t, s] += 1.0
            C[t, t] -= 1.0
        return C

    def linear_part(self):
        """Return ``(M, b)`` such that ``drift(x) = f(x) + M x + b`` on the evolving state."""
        C = self.beta * self.laplacian()
        ev = list(self.evolving)
        M = C[np.ix_(ev, ev)]
        b = np.zeros(len(ev))
        if self.frozen:
            idx = [k for k, _ in self.frozen]
            vals = np.array([v for _, v in self.frozen])
            b = C[np.ix_(ev, idx)] @ vals
        return np.ascontiguousarray(M), b

    # -- evaluation ----------------------------------------------------------

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1:] != (self.dim,):
            raise ValueError(f"state has trailing dimension {x.shape[-1:]}, expected ({self.dim},)")
        return x

    def drift(self, x) -> np.ndarray:
        """Drift at ``x``; ``x`` may carry leading batch axes."""
        x = self._check(x)
        M, b = self.linear_part()
        return node_drift(x, self.nu) + x @ M.T + b

    def jacobian(self, x) -> np.ndarray:
        x = self._check(x)
        M, _ = self.linear_part()
        J = np.broadcast_to(M, x.shape[:-1] + M.shape).copy()
        d = np.arange(self.dim)
        J[..., d, d] += node_drift_derivative(x, self.nu)
        return J

    # -- persistence ---------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "n_nodes": self.n_nodes,
            "edges": [list(e) for e in self.edges],
            "nu": self.nu,
            "beta": self.beta,
            "alpha": self.alpha,
            "frozen": {str(k): v for k, v in self.frozen},
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "NetworkDrift":
        try:
            n = int(doc["n_nodes"])
        except KeyError:
            raise ValueError("model document needs 'n_nodes'") from None
        params = ModelParams(
            nu=float(doc.get("nu", DEFAULT_NU)),
            beta=float(doc.get("beta", 0.0)),
            alpha=float(doc.get("alpha", DEFAULT_ALPHA)),
        )
        frozen = {int(k): float(v) for k, v in (doc.get("frozen") or {}).items()}
        return cls(n, tuple(tuple(e) for e in doc.get("edges", [])), params, frozen)


def load_network(path) -> NetworkDrift:
    return NetworkDrift.from_dict(json.loads(Path(path).read_text()))


# -- presets ------------------------------------------------------------------

def single_node(nu=DEFAULT_NU, alpha=DEFAULT_ALPHA) -> NetworkDrift:
    return NetworkDrift(1, (), ModelParams(nu, 0.0, alpha))


def two_node(beta=0.0, nu=DEFAULT_NU, alpha=DEFAULT_ALPHA) -> NetworkDrift:
    """Unidirectional pair: node 1 is driven by node 2."""
    return NetworkDrift(2, ((1, 0),), ModelParams(nu, beta, alpha))


def three_node_chain(beta=0.0, nu=DEFAULT_NU, alpha=DEFAULT_ALPHA) -> NetworkDrift:
    """Chain 3 -> 2 -> 1."""
    return NetworkDrift(3, ((1, 0), (2, 1)), ModelParams(nu, beta, alpha))


def three_node_slice(beta=0.0, x3="Q", nu=DEFAULT_NU, alpha=DEFAULT_ALPHA) -> NetworkDrift:
    """Planar slice of the chain with the third node frozen.

    ``x3`` is a state letter (``"Q"``, ``"S"``, ``"A"``) or a number.
    """
    value = NodeStates.from_nu(nu).value(x3) if isinstance(x3, str) else float(x3)
    return NetworkDrift(3, ((1, 0), (2, 1)), ModelParams(nu, beta, alpha), {2: value})


PRESETS = {
    "single": single_node,
    "two-node": two_node,
    "three-node": three_node_chain,
    "three-node-slice-Q": lambda **kw: three_node_slice(x3="Q", **kw),
    "three-node-slice-A": lambda **kw: three_node_slice(x3="A", **kw),
}


def preset(name: str, **kw) -> NetworkDrift:
    try:
        return PRESETS[name](**kw)
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def state_from_label(network: NetworkDrift, label: str) -> np.ndarray:
    """Uncoupled position of a state label such as ``"AQ"`` (one letter per evolving node)."""
    if len(label) != network.dim:
        raise ValueError(f"label {label!r} does not match dimension {network.dim}")
    st = network.states
    return np.array([st.value(c) for c in label])


def label_of(network: NetworkDrift, x: Sequence[float]) -> str:
    st = network.states
    return "".join(st.letter(v) for v in x)
