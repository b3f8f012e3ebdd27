"""Kernel EDMD for control-affine maps and the safe sampling planner.

Data are gathered in small clusters around virtual-observation points. Per
cluster, a linear regression over the held inputs estimates the drift and
input maps of the sampled plant at the centre; kernel interpolation with a
compactly supported Wendland kernel then extends those estimates to the
whole domain.
"""
import csv
import itertools
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.interpolate import CubicHermiteSpline
from scipy.linalg import cho_factor, cho_solve
from scipy.spatial import cKDTree

from .errors import (
    ConditioningError,
    InfeasibleSplineError,
    InvalidInputError,
    RankDeficientInputsError,
    UnsupportedKernelError,
)
from .numerics import numerical_rank, pseudo_inverse

SUPPORTED_SMOOTHNESS = (1, 2)
MAX_SPACE_DIM = 3
GRAM_JITTER = 1e-10
GRAM_COND_LIMIT = 1e12
RANK_TOL = 1e-10
SUPPORT_FACTOR = 4.0
DEFAULT_GRID = 200
# Constant-sigma funnel keeps the state within 3/sigma of the reference state.
FUNNEL_STATE_FACTOR = 3.0


@dataclass(frozen=True)
class WendlandKernel:
    """Wendland function ``phi_{l,k}(|x - y| / support)`` on ``R^n``."""

    n: int
    k: int = 1
    support: float = 1.0

    def __post_init__(self):
        if self.k not in SUPPORTED_SMOOTHNESS or not 1 <= self.n <= MAX_SPACE_DIM:
            raise UnsupportedKernelError(
                f"Wendland kernel (n={self.n}, k={self.k}) is not tabulated; "
                f"supported: k in {SUPPORTED_SMOOTHNESS}, n <= {MAX_SPACE_DIM}"
            )
        if not self.support > 0:
            raise InvalidInputError("support radius must be positive")

    @property
    def ell(self):
        return self.n // 2 + self.k + 1

    def profile(self, r):
        return wendland_eval(self, r)

    def __call__(self, x, y):
        """Kernel matrix between point sets of shape ``(p, n)`` and ``(q, n)``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        diff = x[:, None, :] - y[None, :, :]
        return wendland_eval(self, np.sqrt((diff * diff).sum(axis=-1)) / self.support)


def wendland_eval(kernel: WendlandKernel, r):
    """Radial profile at scaled radius ``r >= 0``; zero for ``r >= 1`` and one at ``r = 0``."""
    r = np.asarray(r, dtype=float)
    if np.any(r < 0) or not np.all(np.isfinite(r)):
        raise InvalidInputError("scaled radius must be finite and nonnegative")
    ell = kernel.ell
    s = np.clip(1.0 - r, 0.0, None)
    if kernel.k == 1:
        out = s ** (ell + 1) * ((ell + 1) * r + 1.0)
    else:
        out = s ** (ell + 2) * ((ell * ell + 4 * ell + 3) * r * r + (3 * ell + 6) * r + 3.0) / 3.0
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class FillDistance:
    """Grid estimate of the fill distance.

    The true value lies in ``[value, value + bound]`` where ``bound`` is half
    the diagonal of one grid cell.
    """

    value: float
    witness: np.ndarray
    bound: float


def fill_distance(samples, lower, upper, resolution: int = DEFAULT_GRID) -> FillDistance:
    """``sup_{x in box} min_i |x - x_i|`` scanned on a grid of ``resolution`` cells per axis."""
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    if samples.size == 0:
        raise InvalidInputError("sample set is empty")
    if resolution < 1:
        raise InvalidInputError("grid resolution must be positive")
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    if lower.shape != upper.shape or lower.size != samples.shape[1] or np.any(upper < lower):
        raise InvalidInputError("box bounds do not match the sample dimension")
    axes = [np.linspace(lo, hi, resolution + 1) for lo, hi in zip(lower, upper)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, lower.size)
    dist, _ = cKDTree(samples).query(grid)
    i = int(np.argmax(dist))
    cell = (upper - lower) / resolution
    return FillDistance(float(dist[i]), grid[i].copy(), 0.5 * float(np.linalg.norm(cell)))


def cluster_regression(X, U, X_plus, cluster=0):
    """Estimate ``(g0(x_i), G(x_i))`` from the triplets of one cluster.

    Solves ``[g0, G] = X_plus^T U_i^+`` with ``U_i`` stacking a row of ones over
    the inputs. ``U_i`` must have full row rank ``m + 1``; otherwise the split
    into drift and input part is not identifiable.

    Raises:
        RankDeficientInputsError: if the rank condition fails.
    """
    X_plus = np.atleast_2d(np.asarray(X_plus, dtype=float))
    U = np.asarray(U, dtype=float)
    if U.ndim == 1:
        U = U[:, None]
    d_i, m = U.shape
    if X_plus.shape[0] != d_i or np.asarray(X).shape[0] != d_i:
        raise InvalidInputError("cluster arrays must have one row per triplet")
    Ui = np.vstack([np.ones(d_i), U.T])
    rank = numerical_rank(Ui, RANK_TOL)
    if d_i < m + 1 or rank < m + 1:
        raise RankDeficientInputsError(cluster, rank, m + 1)
    coef = X_plus.T @ pseudo_inverse(Ui, RANK_TOL)
    return coef[:, 0].copy(), coef[:, 1:].copy()


@dataclass
class Cluster:
    X: np.ndarray
    U: np.ndarray
    X_plus: np.ndarray

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.U = np.asarray(self.U, dtype=float).reshape(self.X.shape[0], -1)
        self.X_plus = np.atleast_2d(np.asarray(self.X_plus, dtype=float))


@dataclass
class VirtualObservationSet:
    centers: np.ndarray
    eps_c: float
    clusters: List[Cluster]
    dt: Optional[float] = None

    def __post_init__(self):
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=float))
        if not self.eps_c > 0:
            raise InvalidInputError("cluster radius must be positive")
        if len(self.clusters) != self.centers.shape[0]:
            raise InvalidInputError("need exactly one cluster per virtual point")
        if self.centers.shape[0] > 1:
            dist, _ = cKDTree(self.centers).query(self.centers, k=2)
            if np.any(dist[:, 1] == 0.0):
                raise InvalidInputError("virtual points must be pairwise distinct")
        for i, (c, cl) in enumerate(zip(self.centers, self.clusters)):
            if np.any(np.linalg.norm(cl.X - c, axis=1) > self.eps_c):
                raise InvalidInputError(f"cluster {i} has samples outside the radius {self.eps_c}")

    @property
    def size(self):
        return self.centers.shape[0]

    @property
    def m(self):
        return self.clusters[0].U.shape[1]


def default_cluster_inputs(m: int):
    """Inputs ``0, e_1, ..., e_m`` plus one repeat of ``0``."""
    return np.vstack([np.zeros((1, m)), np.eye(m), np.zeros((1, m))])


def sample_virtual_observations(sys, centers, eps_c, dt, rng=None, inputs=None, substeps=10):
    """Record one cluster per centre by integrating the plant from jittered starts.

    Starting states are drawn uniformly from the ball of radius ``eps_c / 2``
    around each centre (the centre itself when ``rng`` is ``None``).
    """
    from .system import sampled_flow

    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    inputs = default_cluster_inputs(sys.m) if inputs is None else np.atleast_2d(inputs)
    clusters = []
    for c in centers:
        X = np.repeat(c[None, :], len(inputs), axis=0)
        if rng is not None:
            direction = rng.normal(size=X.shape)
            direction /= np.linalg.norm(direction, axis=1, keepdims=True)
            X = X + 0.5 * eps_c * rng.random((len(inputs), 1)) ** (1.0 / c.size) * direction
        Xp = np.array([sampled_flow(sys, x, u, dt, substeps) for x, u in zip(X, inputs)])
        clusters.append(Cluster(X, inputs.copy(), Xp))
    return VirtualObservationSet(centers, eps_c, clusters, dt)


class KernelSurrogate:
    """Kernel-interpolated sampled-data model ``F(x, u) = g0(x) + sum_j g_j(x) u_j``."""

    def __init__(self, points, kernel: WendlandKernel, estimates_g0, estimates_G):
        self.points = np.atleast_2d(np.asarray(points, dtype=float))
        self.kernel = kernel
        self.g0_tilde = np.asarray(estimates_g0, dtype=float)
        self.G_tilde = np.asarray(estimates_G, dtype=float)
        d = self.points.shape[0]
        K = kernel(self.points, self.points)
        K = K + GRAM_JITTER * np.trace(K) / d * np.eye(d)
        cond = np.linalg.cond(K)
        if not cond <= GRAM_COND_LIMIT:
            raise ConditioningError(
                f"Gram matrix condition number {cond:.3g} exceeds {GRAM_COND_LIMIT:.0e}; "
                "use a smaller support radius or fewer virtual points"
            )
        self.gram = K
        self._factor = cho_factor(K, lower=True)
        # One right-hand side per output channel: drift, then each input column.
        rhs = np.concatenate([self.g0_tilde[:, :, None], self.G_tilde], axis=2)
        flat = cho_solve(self._factor, rhs.reshape(d, -1))
        self.coefficients = flat.reshape(rhs.shape)

    @property
    def n(self):
        return self.points.shape[1]

    @property
    def m(self):
        return self.G_tilde.shape[2]

    def maps(self, x):
        """Return ``(g0(x), G(x))`` for a single state."""
        kv = self.kernel(np.asarray(x, dtype=float)[None, :], self.points)[0]
        vals = np.tensordot(kv, self.coefficients, axes=(0, 0))
        return vals[:, 0], vals[:, 1:]

    def __call__(self, x, u):
        g0, G = self.maps(x)
        return g0 + G @ np.atleast_1d(np.asarray(u, dtype=float))

    def interpolation_residual(self):
        """Max relative mismatch between interpolant and the per-point estimates."""
        K = self.kernel(self.points, self.points)
        vals = np.tensordot(K, self.coefficients, axes=(1, 0))
        target = np.concatenate([self.g0_tilde[:, :, None], self.G_tilde], axis=2)
        return float(np.max(np.abs(vals - target)) / max(1.0, np.max(np.abs(target))))


def fit_kernel_surrogate(vos: VirtualObservationSet, kernel: WendlandKernel) -> KernelSurrogate:
    if kernel.n != vos.centers.shape[1]:
        raise InvalidInputError("kernel dimension does not match the state dimension")
    g0, G = [], []
    for i, cl in enumerate(vos.clusters):
        a, B = cluster_regression(cl.X, cl.U, cl.X_plus, cluster=i)
        g0.append(a)
        G.append(B)
    return KernelSurrogate(vos.centers, kernel, np.array(g0), np.array(G))


VOS_HEADER_PREFIX = "# safepc-vos v1"


def write_vos_csv(path, vos: VirtualObservationSet):
    """One row per triplet: centre index and coordinates, sample, input, successor."""
    n, m = vos.centers.shape[1], vos.m
    header = (["center", "eps_c"] + [f"c{i + 1}" for i in range(n)] + [f"x{i + 1}" for i in range(n)]
              + [f"u{i + 1}" for i in range(m)] + [f"xp{i + 1}" for i in range(n)])
    with open(path, "w", newline="") as fh:
        fh.write(VOS_HEADER_PREFIX + "\n")
        w = csv.writer(fh)
        w.writerow(header)
        for i, (c, cl) in enumerate(zip(vos.centers, vos.clusters)):
            for x, u, xp in zip(cl.X, cl.U, cl.X_plus):
                w.writerow([i, repr(float(vos.eps_c))] + [repr(float(v)) for v in (*c, *x, *u, *xp)])


def read_vos_csv(path) -> VirtualObservationSet:
    with open(path, newline="") as fh:
        rows = list(csv.reader(ln for ln in fh if not ln.startswith("#")))
    header, body = rows[0], rows[1:]
    n = sum(1 for h in header if h.startswith("c") and h[1:].isdigit())
    m = sum(1 for h in header if h.startswith("u"))
    groups = {}
    eps_c = None
    for row in body:
        idx = int(row[0])
        eps_c = float(row[1])
        vals = [float(v) for v in row[2:]]
        c = vals[:n]
        x, u, xp = vals[n:2 * n], vals[2 * n:2 * n + m], vals[2 * n + m:]
        g = groups.setdefault(idx, (c, [], [], []))
        g[1].append(x)
        g[2].append(u)
        g[3].append(xp)
    if not groups:
        raise InvalidInputError("no triplets in file")
    order = sorted(groups)
    centers = np.array([groups[i][0] for i in order])
    clusters = [Cluster(groups[i][1], groups[i][2], groups[i][3]) for i in order]
    return VirtualObservationSet(centers, eps_c, clusters)


@dataclass(frozen=True)
class AcceptanceWindow:
    """Sample time ``t`` at which the state must lie within ``radius`` of ``center``."""

    index: int
    t: float
    center: np.ndarray
    radius: float


@dataclass
class SamplingPlan:
    """Reference through the virtual points and the funnel weight that enforces it.

    At knot ``i`` the reference position and velocity equal the first and
    second block of point ``i``.
    """

    points: np.ndarray
    dt: float
    eps_c: float
    sigma: float
    windows: List[AcceptanceWindow] = field(repr=False)
    _spline: Optional[CubicHermiteSpline] = field(repr=False, default=None)

    @property
    def m(self):
        return self.points.shape[1] // 2

    @property
    def knot_times(self):
        return np.array([w.t for w in self.windows])

    @property
    def t_end(self):
        return float(self.knot_times[-1])

    def reference(self, t):
        """``(y_ref(t), dy_ref(t))``, clamped to the knot range.

        A single point with velocity ``v`` yields the ramp ``p + v t``.
        """
        m = self.m
        if self._spline is None:
            p = self.points[0]
            return p[:m] + p[m:] * max(float(t), 0.0), p[m:].copy()
        t = min(max(float(t), 0.0), self.t_end)
        return np.atleast_1d(self._spline(t)), np.atleast_1d(self._spline(t, 1))

    def second_derivative_bound(self, samples_per_segment: int = 50):
        """Max of ``|y_ref''|`` over a fine grid; finite for a W^{2,inf} reference."""
        if self._spline is None:
            return 0.0
        tt = np.linspace(0.0, self.t_end, samples_per_segment * (self.points.shape[0] - 1) + 1)
        return float(np.max(np.abs(self._spline(tt, 2))))

    def knot_table(self):
        """Rows ``(i, t_i, point coordinates...)`` for export."""
        return [(w.index, w.t, *w.center.tolist()) for w in self.windows]

    def write_csv(self, path):
        m = self.m
        header = ["knot", "t"] + [f"y{i + 1}" for i in range(m)] + [f"dy{i + 1}" for i in range(m)] \
            + ["eps_c", "sigma"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in self.knot_table():
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]]
                           + [repr(self.eps_c), repr(self.sigma)])


def plan_reference(points, dt: float, eps_c: float, sigma_floor: float = 0.0, times=None) -> SamplingPlan:
    """Cubic Hermite reference visiting the virtual points in the given order.

    With the constant funnel weight ``sigma = max(3 / eps_c, sigma_floor)`` the
    closed-loop state stays within ``3 / sigma <= eps_c`` of the reference
    state, so at knot ``i`` it lies in the cluster ball of point ``i``.

    Knots sit at ``i * dt`` unless explicit nondecreasing ``times`` are given.
    Repeated knot times are merged when their points agree.

    Raises:
        InfeasibleSplineError: if one knot time carries two different points.
    """
    P = np.atleast_2d(np.asarray(points, dtype=float))
    if P.shape[1] % 2 or P.shape[0] < 1:
        raise InvalidInputError("points must be nonempty and have even dimension (position, velocity)")
    if not dt > 0 or not eps_c > 0:
        raise InvalidInputError("dt and eps_c must be positive")
    if not np.all(np.isfinite(P)):
        raise InvalidInputError("points must be finite")
    m = P.shape[1] // 2
    if times is None:
        times = dt * np.arange(P.shape[0])
    else:
        times = np.asarray(times, dtype=float).ravel()
        if times.size != P.shape[0] or np.any(np.diff(times) < 0):
            raise InvalidInputError("knot times must be nondecreasing, one per point")
        keep = [0]
        for i in range(1, P.shape[0]):
            if times[i] == times[keep[-1]]:
                if not np.array_equal(P[i], P[keep[-1]]):
                    raise InfeasibleSplineError(
                        f"points {keep[-1]} and {i} share knot time {times[i]} but differ"
                    )
                continue
            keep.append(i)
        P, times = P[keep], times[keep]
    sigma = max(FUNNEL_STATE_FACTOR / eps_c, float(sigma_floor))
    spline = None
    if P.shape[0] > 1:
        spline = CubicHermiteSpline(times, P[:, :m], P[:, m:], axis=0)
    windows = [AcceptanceWindow(i, float(t), P[i].copy(), FUNNEL_STATE_FACTOR / sigma)
               for i, t in enumerate(times)]
    return SamplingPlan(P, float(dt), float(eps_c), sigma, windows, spline)


def serpentine_grid(lower, upper, counts: Sequence[int]):
    """Grid points in boustrophedon order, so consecutive points are neighbours."""
    axes = [np.linspace(lo, hi, c) for lo, hi, c in zip(lower, upper, counts)]
    rows = []
    for j, outer in enumerate(axes[0]):
        inner = axes[1] if j % 2 == 0 else axes[1][::-1]
        rows.extend((outer, v) for v in inner)
    return np.array(rows)


def uniform_grid(lower, upper, count: int):
    axes = [np.linspace(lo, hi, count) for lo, hi in zip(lower, upper)]
    return np.array(list(itertools.product(*axes)))
