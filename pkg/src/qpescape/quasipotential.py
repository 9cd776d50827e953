"""Quasipotential of a planar drift by ordered front propagation.

The quasipotential ``U`` relative to a sink ``a`` is the infimum of the
geometric action

    S(psi) = integral ( |psi'| |f(psi)| - psi' . f(psi) ) ds

over paths from ``a`` to ``x``.  It is computed on a grid with a Dijkstra-like
ordered upwind loop: points are accepted in increasing order of ``U`` and each
accepted point ``p`` updates every non-accepted point ``q`` within ``K`` grid
cells, either directly (``U(p) + S([p, q])``) or through a segment ``[p, p1]``
of the accepted front, where ``U`` is interpolated linearly along the segment
and the entry point is found by golden-section search.
"""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numba import njit
from scipy import linalg

from .equilibria import classify, newton
from .model import NetworkDrift

UNKNOWN, CONSIDERED, ACCEPTED, UNREACHABLE = 0, 1, 2, 3

_STOP_MODES = {"whole-domain": 0, "on-boundary-hit": 1, "value-cap": 2}
_QUADRATURES = {"midpoint": 0, "three-point": 1}

#: Default windows: quiescent/saddle states only, and with active states in view.
DOMAIN_QS = (-0.45, 0.35)
DOMAIN_ACTIVE = (-0.45, 1.3)


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class Grid2D:
    x_range: tuple
    y_range: tuple
    nx: int
    ny: int

    def __post_init__(self):
        if self.nx < 16 or self.ny < 16:
            raise ValueError("grid needs at least 16 points per axis")
        if not (self.x_range[0] < self.x_range[1] and self.y_range[0] < self.y_range[1]):
            raise ValueError("empty grid range")
        object.__setattr__(self, "x_range", tuple(map(float, self.x_range)))
        object.__setattr__(self, "y_range", tuple(map(float, self.y_range)))

    @classmethod
    def square(cls, n: int, lo: float = DOMAIN_QS[0], hi: float = DOMAIN_QS[1]) -> "Grid2D":
        return cls((lo, hi), (lo, hi), n, n)

    @property
    def hx(self) -> float:
        return (self.x_range[1] - self.x_range[0]) / (self.nx - 1)

    @property
    def hy(self) -> float:
        return (self.y_range[1] - self.y_range[0]) / (self.ny - 1)

    @property
    def h(self) -> float:
        return max(self.hx, self.hy)

    @property
    def x(self) -> np.ndarray:
        return np.linspace(*self.x_range, self.nx)

    @property
    def y(self) -> np.ndarray:
        return np.linspace(*self.y_range, self.ny)

    def mesh(self):
        """``(X, Y)`` arrays of shape ``(ny, nx)``."""
        return np.meshgrid(self.x, self.y)

    def contains(self, point, strict: bool = False) -> bool:
        x, y = point
        if strict:
            return self.x_range[0] < x < self.x_range[1] and self.y_range[0] < y < self.y_range[1]
        return self.x_range[0] <= x <= self.x_range[1] and self.y_range[0] <= y <= self.y_range[1]


@dataclass(frozen=True)
class SolverParams:
    K: int = 12
    quadrature: str = "three-point"
    anchor_radius: float = 6.0  # in units of grid spacing
    stop: str = "whole-domain"
    value_cap: float = math.inf
    init: str = "linear"  # "linear" (Lyapunov quadratic form) or "segment"
    debug: bool = False

    def __post_init__(self):
        if self.K < 4:
            raise ValueError("K must be at least 4")
        if self.anchor_radius < 2:
            raise ValueError("anchor_radius must be at least 2 grid spacings")
        if self.quadrature not in _QUADRATURES:
            raise ValueError(f"quadrature must be one of {sorted(_QUADRATURES)}")
        if self.stop not in _STOP_MODES:
            raise ValueError(f"stop must be one of {sorted(_STOP_MODES)}")
        if self.init not in ("linear", "segment"):
            raise ValueError("init must be 'linear' or 'segment'")


@dataclass
class QPField:
    grid: Grid2D
    values: np.ndarray  # (ny, nx); NaN where not accepted
    status: np.ndarray  # (ny, nx) uint8
    anchor: np.ndarray
    anchor_label: Optional[str] = None
    beta: float = float("nan")
    nu: float = float("nan")
    params: SolverParams = field(default_factory=SolverParams)
    accepted_order: Optional[np.ndarray] = None  # flat indices, debug mode only

    @property
    def accepted(self) -> np.ndarray:
        return self.status == ACCEPTED

    def max_value(self) -> float:
        v = self.values[self.accepted]
        return float(v.max()) if v.size else float("nan")


@dataclass
class Path:
    vertices: np.ndarray
    complete: bool = True

    @property
    def length(self) -> float:
        if len(self.vertices) < 2:
            return 0.0
        return float(np.sum(np.linalg.norm(np.diff(self.vertices, axis=0), axis=1)))


# -- numba kernels ------------------------------------------------------------------

def _coefficients(network: NetworkDrift) -> np.ndarray:
    if network.dim != 2:
        raise ValueError("the quasipotential solver works on planar drifts only")
    M, b = network.linear_part()
    return np.array([network.nu, M[0, 0], M[0, 1], M[1, 0], M[1, 1], b[0], b[1]])


@njit(cache=True, inline="always")
def _drift(x, y, c):
    fx = -(x - 1.0) * (x * x - c[0]) + c[1] * x + c[2] * y + c[5]
    fy = -(y - 1.0) * (y * y - c[0]) + c[3] * x + c[4] * y + c[6]
    return fx, fy


@njit(cache=True, inline="always")
def _integrand(dx, dy, L, fx, fy):
    return L * math.sqrt(fx * fx + fy * fy) - (dx * fx + dy * fy)


@njit(cache=True)
def _segment_action(ax, ay, fax, fay, bx, by, fbx, fby, c, quad):
    dx = bx - ax
    dy = by - ay
    L = math.sqrt(dx * dx + dy * dy)
    mx, my = _drift(0.5 * (ax + bx), 0.5 * (ay + by), c)
    gm = _integrand(dx, dy, L, mx, my)
    if quad == 0:
        return gm
    return (_integrand(dx, dy, L, fax, fay) + 4.0 * gm + _integrand(dx, dy, L, fbx, fby)) / 6.0


@njit(cache=True)
def segment_action_kernel(ax, ay, bx, by, c, quad):
    fax, fay = _drift(ax, ay, c)
    fbx, fby = _drift(bx, by, c)
    return _segment_action(ax, ay, fax, fay, bx, by, fbx, fby, c, quad)


@njit(cache=True)
def _triangle(x0, y0, u0, x1, y1, u1, xq, yq, fqx, fqy, c, quad, stol):
    """min over s in [0, 1] of (1-s) u0 + s u1 + S([x_s, q]) by golden section."""
    g = 0.6180339887498949
    a = 0.0
    b = 1.0
    s1 = b - g * (b - a)
    s2 = a + g * (b - a)
    xs, ys = x0 + s1 * (x1 - x0), y0 + s1 * (y1 - y0)
    fx, fy = _drift(xs, ys, c)
    v1 = (1 - s1) * u0 + s1 * u1 + _segment_action(xs, ys, fx, fy, xq, yq, fqx, fqy, c, quad)
    xs, ys = x0 + s2 * (x1 - x0), y0 + s2 * (y1 - y0)
    fx, fy = _drift(xs, ys, c)
    v2 = (1 - s2) * u0 + s2 * u1 + _segment_action(xs, ys, fx, fy, xq, yq, fqx, fqy, c, quad)
    while b - a > stol:
        if v1 < v2:
            b = s2
            s2 = s1
            v2 = v1
            s1 = b - g * (b - a)
            xs, ys = x0 + s1 * (x1 - x0), y0 + s1 * (y1 - y0)
            fx, fy = _drift(xs, ys, c)
            v1 = (1 - s1) * u0 + s1 * u1 + _segment_action(xs, ys, fx, fy, xq, yq, fqx, fqy,
                                                           c, quad)
        else:
            a = s1
            s1 = s2
            v1 = v2
            s2 = a + g * (b - a)
            xs, ys = x0 + s2 * (x1 - x0), y0 + s2 * (y1 - y0)
            fx, fy = _drift(xs, ys, c)
            v2 = (1 - s2) * u0 + s2 * u1 + _segment_action(xs, ys, fx, fy, xq, yq, fqx, fqy,
                                                           c, quad)
    return min(v1, v2)


@njit(cache=True, inline="always")
def _sift_up(heap, pos, key, k):
    item = heap[k]
    while k > 0:
        parent = (k - 1) >> 1
        other = heap[parent]
        if key[other] < key[item] or (key[other] == key[item] and other < item):
            break
        heap[k] = other
        pos[other] = k
        k = parent
    heap[k] = item
    pos[item] = k


@njit(cache=True, inline="always")
def _sift_down(heap, pos, key, k, n):
    item = heap[k]
    while True:
        child = 2 * k + 1
        if child >= n:
            break
        right = child + 1
        if right < n:
            a = heap[child]
            b = heap[right]
            if key[b] < key[a] or (key[b] == key[a] and b < a):
                child = right
        other = heap[child]
        if key[item] < key[other] or (key[item] == key[other] and item < other):
            break
        heap[k] = other
        pos[other] = k
        k = child
    heap[k] = item
    pos[item] = k


@njit(cache=True)
def _ordered_upwind(nx, ny, x0, y0, hx, hy, c, U, status, fixed, offsets, K, quad,
                    stop_mode, cap, order):
    N = nx * ny
    FX = np.empty(N)
    FY = np.empty(N)
    for p in range(N):
        FX[p], FY[p] = _drift(x0 + (p % nx) * hx, y0 + (p // nx) * hy, c)
    best1 = np.full(N, np.inf)
    parent = np.full(N, -1, dtype=np.int64)
    heap = np.empty(N, dtype=np.int64)
    pos = np.full(N, -1, dtype=np.int64)
    n = 0
    for p in range(N):
        if status[p] == 1:
            heap[n] = p
            pos[p] = n
            n += 1
            _sift_up(heap, pos, U, n - 1)
    h = max(hx, hy)
    n_acc = 0
    while n > 0:
        p = heap[0]
        n -= 1
        if n > 0:
            heap[0] = heap[n]
            pos[heap[0]] = 0
            _sift_down(heap, pos, U, 0, n)
        pos[p] = -1
        if stop_mode == 2 and U[p] > cap:
            status[p] = 1
            break
        status[p] = 2
        order[n_acc] = p
        n_acc += 1
        ip = p % nx
        jp = p // nx
        if stop_mode == 1 and (ip == 0 or jp == 0 or ip == nx - 1 or jp == ny - 1):
            break
        xp = x0 + ip * hx
        yp = y0 + jp * hy
        up = U[p]
        for k in range(offsets.shape[0]):
            iq = ip + offsets[k, 0]
            jq = jp + offsets[k, 1]
            if iq < 0 or jq < 0 or iq >= nx or jq >= ny:
                continue
            q = jq * nx + iq
            if status[q] == 2 or fixed[q]:
                continue
            xq = x0 + iq * hx
            yq = y0 + jq * hy
            u1 = up + _segment_action(xp, yp, FX[p], FY[p], xq, yq, FX[q], FY[q], c, quad)
            cand = np.inf
            if u1 < best1[q]:
                best1[q] = u1
                parent[q] = p
                cand = u1
                for dj in range(-1, 2):
                    for di in range(-1, 2):
                        if di == 0 and dj == 0:
                            continue
                        i1 = ip + di
                        j1 = jp + dj
                        if i1 < 0 or j1 < 0 or i1 >= nx or j1 >= ny:
                            continue
                        p1 = j1 * nx + i1
                        if status[p1] != 2:
                            continue
                        seg = math.sqrt((di * hx) ** 2 + (dj * hy) ** 2)
                        t = _triangle(xp, yp, up, x0 + i1 * hx, y0 + j1 * hy, U[p1],
                                      xq, yq, FX[q], FY[q], c, quad, 0.01 * h / seg)
                        if t < cand:
                            cand = t
            else:
                par = parent[q]
                if par >= 0:
                    di = par % nx - ip
                    dj = par // nx - jp
                    if -1 <= di <= 1 and -1 <= dj <= 1:
                        seg = math.sqrt((di * hx) ** 2 + (dj * hy) ** 2)
                        cand = _triangle(x0 + (par % nx) * hx, y0 + (par // nx) * hy, U[par],
                                         xp, yp, up, xq, yq, FX[q], FY[q], c, quad,
                                         0.01 * h / seg)
            if cand < up:
                # causality: nothing not yet accepted may sit below the front
                cand = up
            if cand < U[q]:
                U[q] = cand
                if status[q] == 0:
                    status[q] = 1
                    heap[n] = q
                    pos[q] = n
                    n += 1
                    _sift_up(heap, pos, U, n - 1)
                else:
                    _sift_up(heap, pos, U, pos[q])
    return n_acc


# -- public API -----------------------------------------------------------------------

def geometric_action_segment(a, b, network: NetworkDrift, quadrature: str = "three-point",
                             n: int = 1) -> float:
    """Geometric action of the straight segment ``a -> b`` (composite rule, ``n`` panels)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.array_equal(a, b):
        raise ValueError("segment endpoints coincide")
    d = b - a
    L = np.linalg.norm(d)
    t = np.linspace(0.0, 1.0, 2 * n + 1)
    pts = a + t[:, None] * d
    f = network.drift(pts)
    g = L * np.linalg.norm(f, axis=1) - f @ d
    if quadrature == "midpoint":
        return float(np.mean(g[1::2]))
    if quadrature != "three-point":
        raise ValueError(f"unknown quadrature {quadrature!r}")
    return float(np.sum(g[0:-1:2] + 4 * g[1::2] + g[2::2]) / (6 * n))


def action_of_path(path, network: NetworkDrift, quadrature: str = "three-point",
                   n: int = 1) -> float:
    """Sum of segment actions along a polyline (``Path`` or array of vertices)."""
    v = np.asarray(path.vertices if isinstance(path, Path) else path, dtype=float)
    if len(v) < 2:
        raise ValueError("a path needs at least two vertices")
    return sum(geometric_action_segment(v[i], v[i + 1], network, quadrature, n)
               for i in range(len(v) - 1) if not np.array_equal(v[i], v[i + 1]))


def linear_quasipotential(J) -> np.ndarray:
    """Quadratic form ``Q`` with ``U(x) ~ x^T Q x`` near a sink with Jacobian ``J``."""
    sigma = linalg.solve_continuous_lyapunov(J, -np.eye(len(J)))
    return 0.5 * np.linalg.inv(sigma)


def _disc_offsets(K, hx, hy):
    h = max(hx, hy)
    ki = int(math.ceil(K * h / hx))
    kj = int(math.ceil(K * h / hy))
    out = [(di, dj) for dj in range(-kj, kj + 1) for di in range(-ki, ki + 1)
           if (di or dj) and (di * hx) ** 2 + (dj * hy) ** 2 <= (K * h) ** 2 + 1e-15]
    return np.array(out, dtype=np.int64)


def solve(network: NetworkDrift, grid: Grid2D, anchor, params: SolverParams = SolverParams(),
          anchor_label: Optional[str] = None) -> QPField:
    """Quasipotential of ``network`` relative to the sink ``anchor`` on ``grid``."""
    if min(grid.nx, grid.ny) <= 2 * params.K:
        raise SolverError(f"grid {grid.nx}x{grid.ny} too coarse for K={params.K}")
    anchor, ok = newton(network, np.asarray(anchor, dtype=float))
    if not ok:
        raise SolverError(f"anchor {anchor} is not an equilibrium")
    stab, _ = classify(anchor, network)
    if stab != "sink":
        raise SolverError(f"anchor {anchor} is a {stab}, not a sink")
    if not grid.contains(anchor, strict=True):
        raise SolverError("anchor lies outside the grid")

    c = _coefficients(network)
    quad = _QUADRATURES[params.quadrature]
    X, Y = grid.mesh()
    r = np.hypot(X - anchor[0], Y - anchor[1])
    init = r <= params.anchor_radius * grid.h
    U = np.full(grid.nx * grid.ny, np.inf)
    if params.init == "linear":
        Qf = linear_quasipotential(network.jacobian(anchor))
        dx = np.stack([X[init] - anchor[0], Y[init] - anchor[1]], axis=-1)
        U[init.ravel()] = np.einsum("ni,ij,nj->n", dx, Qf, dx)
    else:
        vals = [segment_action_kernel(anchor[0], anchor[1], x, y, c, quad)
                for x, y in zip(X[init], Y[init])]
        U[init.ravel()] = vals
    status = np.zeros(grid.nx * grid.ny, dtype=np.uint8)
    status[init.ravel()] = CONSIDERED
    fixed = init.ravel().copy()
    order = np.empty(grid.nx * grid.ny, dtype=np.int64)
    n_acc = _ordered_upwind(grid.nx, grid.ny, grid.x_range[0], grid.y_range[0], grid.hx,
                            grid.hy, c, U, status, fixed, _disc_offsets(params.K, grid.hx, grid.hy),
                            params.K, quad, _STOP_MODES[params.stop], params.value_cap, order)
    status[status != ACCEPTED] = UNREACHABLE
    U[status != ACCEPTED] = np.nan
    return QPField(grid, U.reshape(grid.ny, grid.nx), status.reshape(grid.ny, grid.nx),
                   anchor, anchor_label, network.beta, network.nu, params,
                   order[:n_acc].copy() if params.debug else None)


def sample_field(qp: QPField, point) -> Optional[float]:
    """Bilinear interpolation of ``U``; ``None`` if any surrounding node is not accepted."""
    g = qp.grid
    x, y = map(float, point)
    if not g.contains((x, y)):
        raise ValueError(f"point {point} outside grid")
    fi = (x - g.x_range[0]) / g.hx
    fj = (y - g.y_range[0]) / g.hy
    i = min(int(math.floor(fi)), g.nx - 2)
    j = min(int(math.floor(fj)), g.ny - 2)
    tx, ty = fi - i, fj - j
    block = qp.status[j:j + 2, i:i + 2]
    wts = np.array([[(1 - tx) * (1 - ty), tx * (1 - ty)], [(1 - tx) * ty, tx * ty]])
    need = wts > 0
    if np.any(block[need] != ACCEPTED):
        return None
    v = qp.values[j:j + 2, i:i + 2]
    return float(np.sum(np.where(need, v, 0.0) * wts))


def gradient(qp: QPField):
    """Central-difference gradient of ``U``; NaN unless all four neighbours are accepted."""
    U = qp.values
    acc = qp.accepted
    gx = np.full(U.shape, np.nan)
    gy = np.full(U.shape, np.nan)
    ok = acc[1:-1, 2:] & acc[1:-1, :-2] & acc[2:, 1:-1] & acc[:-2, 1:-1]
    gx[1:-1, 1:-1] = np.where(ok, (U[1:-1, 2:] - U[1:-1, :-2]) / (2 * qp.grid.hx), np.nan)
    gy[1:-1, 1:-1] = np.where(ok, (U[2:, 1:-1] - U[:-2, 1:-1]) / (2 * qp.grid.hy), np.nan)
    return gx, gy


def hjb_residual(qp: QPField, network: NetworkDrift) -> np.ndarray:
    """Pointwise ``|grad U|^2 + 2 f . grad U`` (NaN where the stencil is incomplete)."""
    gx, gy = gradient(qp)
    X, Y = qp.grid.mesh()
    f = network.drift(np.stack([X, Y], axis=-1))
    return gx * gx + gy * gy + 2 * (f[..., 0] * gx + f[..., 1] * gy)


def extract_contours(qp: QPField, levels) -> dict:
    """Marching-squares level sets of ``U`` restricted to the accepted region.

    Returns ``{level: [array (n, 2) of (x, y) vertices, ...]}``.
    """
    from skimage import measure

    g = qp.grid
    acc = qp.accepted
    data = np.where(acc, qp.values, 0.0)
    vmax = qp.max_value()
    out = {}
    for level in levels:
        if not np.isfinite(vmax) or level > vmax:
            out[level] = []
            continue
        lines = measure.find_contours(data, level, mask=acc)
        out[level] = [np.column_stack([g.x_range[0] + ln[:, 1] * g.hx,
                                       g.y_range[0] + ln[:, 0] * g.hy]) for ln in lines]
    return out


def _bilinear(arr, g: Grid2D, x, y):
    fi = (x - g.x_range[0]) / g.hx
    fj = (y - g.y_range[0]) / g.hy
    i = min(max(int(math.floor(fi)), 0), g.nx - 2)
    j = min(max(int(math.floor(fj)), 0), g.ny - 2)
    tx, ty = fi - i, fj - j
    return ((1 - tx) * (1 - ty) * arr[j, i] + tx * (1 - ty) * arr[j, i + 1]
            + (1 - tx) * ty * arr[j + 1, i] + tx * ty * arr[j + 1, i + 1])


def descend_path(qp: QPField, start, network: NetworkDrift, step: Optional[float] = None,
                 max_steps: int = 20000, stall_ratio: float = 0.1) -> Path:
    """Steepest descent of ``U`` from ``start`` back to the anchor.

    The path is flagged incomplete if it stalls on a plateau, i.e. where
    ``|grad U|`` is small compared with ``2 |f|`` (in the basin the two agree
    for gradient drifts), or leaves the computed region.
    """
    g = qp.grid
    step = 0.5 * g.h if step is None else step
    stop_r = qp.params.anchor_radius * g.h
    x = np.asarray(start, dtype=float)
    if sample_field(qp, x) is None:
        raise ValueError("start point is not in the computed region")
    gx, gy = gradient(qp)
    verts = [x.copy()]
    for _ in range(max_steps):
        if np.linalg.norm(x - qp.anchor) <= stop_r:
            if not np.array_equal(verts[-1], qp.anchor):
                verts.append(qp.anchor.copy())
            return Path(np.array(verts), True)
        if not g.contains(x):
            break
        vx = _bilinear(gx, g, *x)
        vy = _bilinear(gy, g, *x)
        if not (np.isfinite(vx) and np.isfinite(vy)):
            break
        gn = math.hypot(vx, vy)
        fn = float(np.linalg.norm(network.drift(x)))
        if gn == 0.0 or (fn > 1e-4 and gn < stall_ratio * 2 * fn):
            break
        x = x - step * np.array([vx, vy]) / gn
        verts.append(x.copy())
    return Path(np.array(verts), False)


# -- persistence ----------------------------------------------------------------------

_MAGIC = b"QPF1"
_HEADER = struct.Struct("<4sII8d")


def save_field(path, qp: QPField):
    g = qp.grid
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, g.nx, g.ny, *g.x_range, *g.y_range,
                              float(qp.anchor[0]), float(qp.anchor[1]), qp.beta, qp.nu))
        fh.write(np.ascontiguousarray(qp.values, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(qp.status, dtype=np.uint8).tobytes())


def load_field(path) -> QPField:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ValueError("truncated field file")
    magic, nx, ny, x0, x1, y0, y1, ax, ay, beta, nu = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError(f"bad magic {magic!r}; expected {_MAGIC!r}")
    n = nx * ny
    off = _HEADER.size
    if len(raw) != off + 9 * n:
        raise ValueError("field file size does not match its header")
    values = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(ny, nx).copy()
    status = np.frombuffer(raw, dtype=np.uint8, count=n, offset=off + 8 * n).reshape(ny, nx).copy()
    return QPField(Grid2D((x0, x1), (y0, y1), nx, ny), values, status, np.array([ax, ay]),
                   None, beta, nu)


def write_contours_csv(path, contours: dict):
    with open(path, "w", newline="") as fh:
        fh.write("# qpescape-schema: contours v1\n")
        w = csv.writer(fh)
        w.writerow(["level", "polyline", "x", "y"])
        for level, lines in contours.items():
            for k, line in enumerate(lines):
                for x, y in line:
                    w.writerow([repr(float(level)), k, repr(float(x)), repr(float(y))])
