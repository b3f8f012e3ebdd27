"""Extended dynamic mode decomposition with a bilinear control model.

The Koopman matrix is the least-squares fit ``K = Psi(X+) Psi(X)^+`` over a
monomial dictionary. For control-affine plants sampled with zero-order hold,
one matrix is fitted per constant input level ``0, e_1, ..., e_m`` and a
general input interpolates between them:

    K_u = K_0 + sum_i u_i (K_i - K_0)
"""
import csv
import warnings
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Iterable, List, Optional

import numpy as np

from .errors import InvalidInputError
from .numerics import numerical_rank, pseudo_inverse

PSI_RCOND = 1e-10


class RankDeficiencyWarning(UserWarning):
    pass


def _monomial_exponents(n, max_degree):
    rows = []
    for deg in range(max_degree + 1):
        degree_rows = []
        for combo in combinations_with_replacement(range(n), deg):
            e = [0] * n
            for i in combo:
                e[i] += 1
            degree_rows.append(tuple(e))
        # x1^2 before x1 x2 before x2^2: descending lexicographic within a degree.
        rows.extend(sorted(set(degree_rows), reverse=True))
    return np.array(rows, dtype=int)


@dataclass(frozen=True)
class Dictionary:
    """Monomial observables ``prod_j x_j^{p_j}``, constant first, then by total degree."""

    n: int
    max_degree: int
    exponents: np.ndarray = field(repr=False)

    @property
    def size(self):
        return self.exponents.shape[0]

    @property
    def coordinate_rows(self):
        rows = []
        for i in range(self.n):
            target = np.zeros(self.n, dtype=int)
            target[i] = 1
            rows.append(int(np.flatnonzero((self.exponents == target).all(axis=1))[0]))
        return np.array(rows)

    def _powers(self, x):
        # powers[p, j] = x_j ** p
        return np.asarray(x, dtype=float)[None, :] ** np.arange(self.max_degree + 1)[:, None]

    def evaluate(self, x):
        pw = self._powers(x)
        cols = np.arange(self.n)
        return np.prod(pw[self.exponents, cols], axis=1)

    def evaluate_many(self, X):
        """Columns are the lifted samples: shape ``(size, d)`` for ``X`` of shape ``(d, n)``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.ones((self.size, X.shape[0]))
        for j in range(self.n):
            out *= X[None, :, j] ** self.exponents[:, j][:, None]
        return out

    def jacobian(self, x):
        pw = self._powers(x)
        cols = np.arange(self.n)
        factors = pw[self.exponents, cols]
        J = np.empty((self.size, self.n))
        for j in range(self.n):
            e = self.exponents[:, j]
            others = np.prod(np.delete(factors, j, axis=1), axis=1)
            J[:, j] = e * pw[np.maximum(e - 1, 0), j] * others
        return J


def make_monomial_dictionary(n: int, max_degree: int) -> Dictionary:
    if n < 1 or max_degree < 1:
        raise InvalidInputError("need n >= 1 and max_degree >= 1")
    return Dictionary(n=n, max_degree=max_degree, exponents=_monomial_exponents(n, max_degree))


@dataclass
class SnapshotSet:
    """Pairs ``(x, x+)`` recorded under one constant input ``u`` held for ``dt``."""

    u: np.ndarray
    dt: float
    X: np.ndarray = None
    X_plus: np.ndarray = None

    def __post_init__(self):
        self.u = np.atleast_1d(np.asarray(self.u, dtype=float))
        if self.X is not None:
            self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
            self.X_plus = np.atleast_2d(np.asarray(self.X_plus, dtype=float))
            if self.X.shape != self.X_plus.shape:
                raise InvalidInputError("X and X_plus must have the same shape")

    def __len__(self):
        return 0 if self.X is None else self.X.shape[0]

    def append(self, x, x_plus):
        x = np.asarray(x, dtype=float).ravel()
        x_plus = np.asarray(x_plus, dtype=float).ravel()
        if self.X is None:
            self.X = x[None, :].copy()
            self.X_plus = x_plus[None, :].copy()
        else:
            self.X = np.vstack([self.X, x])
            self.X_plus = np.vstack([self.X_plus, x_plus])

    def copy(self):
        return SnapshotSet(self.u.copy(), self.dt,
                           None if self.X is None else self.X.copy(),
                           None if self.X_plus is None else self.X_plus.copy())


def sample_snapshots(sys, points, u, dt, substeps=10) -> SnapshotSet:
    """Generate successors by integrating the plant from each point under constant ``u``."""
    from .system import sampled_flow

    points = np.atleast_2d(np.asarray(points, dtype=float))
    succ = np.array([sampled_flow(sys, x, u, dt, substeps) for x in points])
    return SnapshotSet(u=u, dt=dt, X=points, X_plus=succ)


def edmd_fit(snap: SnapshotSet, dictionary: Dictionary, tol: float = PSI_RCOND) -> np.ndarray:
    if len(snap) < 1:
        raise InvalidInputError("snapshot set is empty")
    PX = dictionary.evaluate_many(snap.X)
    PY = dictionary.evaluate_many(snap.X_plus)
    rank = numerical_rank(PX, tol)
    if rank < min(PX.shape):
        warnings.warn(
            f"lifted data matrix has rank {rank} < {min(PX.shape)}; fit uses the pseudo-inverse",
            RankDeficiencyWarning,
            stacklevel=2,
        )
    return PY @ pseudo_inverse(PX, tol)


@dataclass
class BilinearSurrogate:
    K0: np.ndarray
    Ks: List[np.ndarray]
    dt: float
    dictionary: Dictionary

    def __post_init__(self):
        self.selector = self.dictionary.coordinate_rows
        self.deltas = [Ki - self.K0 for Ki in self.Ks]

    @property
    def m(self):
        return len(self.Ks)

    def K_u(self, u):
        u = np.atleast_1d(np.asarray(u, dtype=float))
        K = self.K0.copy()
        for ui, D in zip(u, self.deltas):
            K += ui * D
        return K

    def reproject(self, z):
        return np.asarray(z)[self.selector]

    def step(self, x, u):
        return surrogate_step(self, x, u)


def fit_bilinear(snap0: SnapshotSet, snaps: List[SnapshotSet], dictionary: Dictionary,
                 tol: float = PSI_RCOND) -> BilinearSurrogate:
    m = len(snaps)
    if not np.allclose(snap0.u, 0.0):
        raise InvalidInputError("autonomous snapshot set must have u = 0")
    for i, s in enumerate(snaps):
        if s.dt != snap0.dt:
            raise InvalidInputError(f"snapshot set {i + 1} has dt={s.dt}, expected {snap0.dt}")
        if not np.allclose(s.u, np.eye(m)[i]):
            raise InvalidInputError(f"snapshot set {i + 1} must be recorded with u = e_{i + 1}")
    K0 = edmd_fit(snap0, dictionary, tol)
    Ks = [edmd_fit(s, dictionary, tol) for s in snaps]
    return BilinearSurrogate(K0=K0, Ks=Ks, dt=snap0.dt, dictionary=dictionary)


def surrogate_step(sur: BilinearSurrogate, x, u):
    """One-step prediction: build ``K_u``, apply it to ``Psi(x)``, keep the coordinate rows."""
    psi = sur.dictionary.evaluate(x)
    z = sur.K0[sur.selector] @ psi
    for ui, D in zip(np.atleast_1d(np.asarray(u, dtype=float)), sur.deltas):
        z = z + ui * (D[sur.selector] @ psi)
    return z


class OnlineCollector:
    """Accumulates zero-order-hold data recorded while the loop runs.

    An interval contributes a pair only if the safeguard stayed inactive on
    the whole interval and the held input equals one of ``0, e_1, ..., e_m``.
    Everything else is dropped silently. ``cap`` bounds the total pair count.
    """

    def __init__(self, m: int, dt: float, cap: Optional[int] = None, initial=None):
        self.m = m
        self.dt = dt
        self.cap = cap
        levels = [np.zeros(m)] + [np.eye(m)[i] for i in range(m)]
        self.sets = [SnapshotSet(u=lvl, dt=dt) for lvl in levels]
        if initial is not None:
            for s in initial:
                idx = self._level_index(s.u)
                if idx is None:
                    raise InvalidInputError(f"initial data with unsupported input {s.u}")
                for x, xp in zip(s.X, s.X_plus):
                    self.sets[idx].append(x, xp)

    def _level_index(self, u):
        u = np.atleast_1d(np.asarray(u, dtype=float))
        for i, s in enumerate(self.sets):
            if np.array_equal(u, s.u):
                return i
        return None

    @property
    def count(self):
        return sum(len(s) for s in self.sets)

    @property
    def full(self):
        return self.cap is not None and self.count >= self.cap

    def offer(self, x_start, u, x_end, a_tau_max: float) -> bool:
        if a_tau_max != 0.0 or self.full:
            return False
        idx = self._level_index(u)
        if idx is None:
            return False
        self.sets[idx].append(x_start, x_end)
        return True

    @property
    def snap0(self):
        return self.sets[0]

    @property
    def input_sets(self):
        return self.sets[1:]

    def ready(self):
        return all(len(s) > 0 for s in self.sets)

    def snapshot_copy(self):
        return [s.copy() for s in self.sets]


def collect_online(records: Iterable, m: int, dt: float, cap: Optional[int] = None,
                   initial=None) -> List[SnapshotSet]:
    """Filter ``(x_start, u_held, x_end, a_tau_values)`` interval records into snapshot sets.

    ``a_tau_values`` holds every activation value seen inside the interval.
    Returns ``[snap0, snap_e1, ..., snap_em]``.
    """
    col = OnlineCollector(m, dt, cap=cap, initial=initial)
    for x0, u, x1, a_vals in records:
        a_max = float(np.max(a_vals)) if np.size(a_vals) else 0.0
        col.offer(x0, u, x1, a_max)
    return col.sets


SNAPSHOT_HEADER_PREFIX = "# safepc-snapshots v1"


def write_snapshots_csv(path, sets: List[SnapshotSet]):
    sets = [s for s in sets if len(s)]
    if not sets:
        raise InvalidInputError("nothing to write")
    n = sets[0].X.shape[1]
    m = sets[0].u.size
    header = [f"x{i + 1}" for i in range(n)] + [f"u{i + 1}" for i in range(m)] \
        + [f"xp{i + 1}" for i in range(n)] + ["dt"]
    with open(path, "w", newline="") as fh:
        fh.write(SNAPSHOT_HEADER_PREFIX + "\n")
        w = csv.writer(fh)
        w.writerow(header)
        for s in sets:
            for x, xp in zip(s.X, s.X_plus):
                w.writerow([repr(float(v)) for v in x] + [repr(float(v)) for v in s.u]
                           + [repr(float(v)) for v in xp] + [repr(float(s.dt))])


def read_snapshots_csv(path) -> List[SnapshotSet]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    n = sum(1 for h in header if h.startswith("x") and not h.startswith("xp"))
    m = sum(1 for h in header if h.startswith("u"))
    groups = {}
    order = []
    for row in reader:
        vals = [float(v) for v in row]
        x, u, xp, dt = vals[:n], tuple(vals[n:n + m]), vals[n + m:2 * n + m], vals[-1]
        key = (u, dt)
        if key not in groups:
            groups[key] = SnapshotSet(u=np.array(u), dt=dt)
            order.append(key)
        groups[key].append(x, xp)
    return [groups[k] for k in order]
