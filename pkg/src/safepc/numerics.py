"""Small dense numerical kernels: pseudo-inverse, rank, RK4, QP solvers.

Everything here is a pure function of its arguments. Matrices are plain
``numpy.ndarray`` objects; the SVD itself is delegated to LAPACK.
"""
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .errors import (
    DegenerateConstraintsError,
    DivergedError,
    IntegrationBlowupError,
    InvalidInputError,
)

DEFAULT_RCOND = 1e-12

ARMIJO_C = 1e-4
BACKTRACK = 0.5
INITIAL_STEP = 1.0
MAX_BACKTRACKS = 60


class SvdFactorization(NamedTuple):
    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray


def _as_finite_matrix(m):
    a = np.atleast_2d(np.asarray(m, dtype=float))
    if a.ndim != 2:
        raise InvalidInputError(f"expected a matrix, got array with shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError("matrix has non-finite entries")
    return a


def svd(m) -> SvdFactorization:
    """Thin SVD with singular values in descending order."""
    a = _as_finite_matrix(m)
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    return SvdFactorization(u, s, vt)


def pseudo_inverse(m, tol: float = DEFAULT_RCOND) -> np.ndarray:
    """Moore-Penrose inverse, zeroing singular values below ``tol * s_max``.

    Raises:
        InvalidInputError: if ``m`` has non-finite entries or ``tol <= 0``.
    """
    if not tol > 0:
        raise InvalidInputError("tol must be positive")
    a = _as_finite_matrix(m)
    if a.size == 0:
        return np.zeros((a.shape[1], a.shape[0]))
    u, s, vt = svd(a)
    cutoff = tol * (s[0] if s.size else 0.0)
    keep = s > cutoff
    s_inv = np.zeros_like(s)
    s_inv[keep] = 1.0 / s[keep]
    return (vt.T * s_inv) @ u.T


def numerical_rank(m, tol: float = DEFAULT_RCOND) -> int:
    """Number of singular values above ``tol`` times the largest one."""
    if not tol > 0:
        raise InvalidInputError("tol must be positive")
    a = _as_finite_matrix(m)
    if a.size == 0:
        return 0
    s = np.linalg.svd(a, compute_uv=False)
    if s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s > tol * s[0]))


def rk4_step(field: Callable, t: float, x, h: float) -> np.ndarray:
    """One classical Runge-Kutta step of ``x' = field(t, x)``.

    Raises:
        IntegrationBlowupError: if any stage evaluation is non-finite.
    """
    if not h > 0:
        raise InvalidInputError("step size must be positive")
    x = np.asarray(x, dtype=float)
    k1 = np.asarray(field(t, x), dtype=float)
    k2 = np.asarray(field(t + 0.5 * h, x + 0.5 * h * k1), dtype=float)
    k3 = np.asarray(field(t + 0.5 * h, x + 0.5 * h * k2), dtype=float)
    k4 = np.asarray(field(t + h, x + h * k3), dtype=float)
    x_new = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(x_new)):
        raise IntegrationBlowupError(t)
    return x_new


def solve_equality_qp(hessian, linear, eq_matrix=None, eq_rhs=None) -> np.ndarray:
    """Minimize ``0.5 x'Hx + g'x`` subject to ``Ax = b`` via the KKT system.

    ``eq_matrix`` may be ``None`` or have zero rows for an unconstrained
    problem. The KKT solve is followed by one step of iterative refinement.

    Raises:
        DegenerateConstraintsError: if the KKT matrix is singular.
    """
    H = _as_finite_matrix(hessian)
    g = np.asarray(linear, dtype=float).ravel()
    n = g.size
    if H.shape != (n, n):
        raise InvalidInputError(f"hessian shape {H.shape} does not match linear term of size {n}")
    if eq_matrix is None or np.size(eq_matrix) == 0:
        A = np.zeros((0, n))
        b = np.zeros(0)
    else:
        A = _as_finite_matrix(eq_matrix)
        b = np.asarray(eq_rhs, dtype=float).ravel()
        if A.shape != (b.size, n):
            raise InvalidInputError("equality constraint dimensions do not match")
    p = A.shape[0]

    # Row/column equilibration keeps Q = 1e4 style weights from wrecking the solve.
    kkt = np.block([[H, A.T], [A, np.zeros((p, p))]])
    rhs = np.concatenate([-g, b])
    scale = np.sqrt(np.maximum(np.abs(kkt).max(axis=1), 1e-300))
    scaled = kkt / scale[:, None] / scale[None, :]
    if np.linalg.cond(scaled) > 1e14:
        raise DegenerateConstraintsError("KKT system is singular")
    try:
        z = np.linalg.solve(scaled, rhs / scale) / scale
        z = z + np.linalg.solve(scaled, (rhs - kkt @ z) / scale) / scale
    except np.linalg.LinAlgError as exc:
        raise DegenerateConstraintsError("KKT system is singular") from exc
    x = z[:n]
    return x


@dataclass(frozen=True)
class BoxConstraint:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).ravel()
        hi = np.asarray(self.upper, dtype=float).ravel()
        if lo.shape != hi.shape:
            raise InvalidInputError("box bounds have different shapes")
        if np.any(lo > hi):
            raise InvalidInputError("box lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def symmetric(cls, bound, size):
        b = np.broadcast_to(np.asarray(bound, dtype=float), (size,))
        return cls(-b, b)

    @classmethod
    def unbounded(cls, size):
        return cls(np.full(size, -np.inf), np.full(size, np.inf))

    def project(self, x):
        return np.clip(x, self.lower, self.upper)

    def contains(self, x, atol=0.0):
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower - atol) and np.all(x <= self.upper + atol))


@dataclass
class BoxResult:
    x: np.ndarray
    fun: float
    iterations: int
    converged: bool
    pg_norm: float


def minimize_box(
    objective: Callable,
    gradient: Callable,
    box: BoxConstraint,
    x0,
    max_iters: int = 500,
    step_tol: float = 1e-8,
    rel_tol: float = 0.0,
) -> BoxResult:
    """Projected-gradient descent with Armijo backtracking along the projection arc.

    The first trial step is 1.0; afterwards the trial step is the
    Barzilai-Borwein length of the previous iteration, then halved until the
    sufficient-decrease test holds. Iteration stops once the projected
    gradient ``|P(x - g) - x|`` falls below ``step_tol + rel_tol * |f(x)|``.

    Raises:
        DivergedError: if the objective is non-finite at the starting point.
    """
    x = box.project(np.asarray(x0, dtype=float).ravel())
    f = float(objective(x))
    if not np.isfinite(f):
        raise DivergedError("objective is non-finite at the starting point")
    g = np.asarray(gradient(x), dtype=float).ravel()
    step = INITIAL_STEP
    pg = np.linalg.norm(box.project(x - g) - x)
    it = 0
    converged = pg <= step_tol + rel_tol * abs(f)
    while not converged and it < max_iters:
        it += 1
        alpha = step
        accepted = False
        for _ in range(MAX_BACKTRACKS):
            x_try = box.project(x - alpha * g)
            d = x_try - x
            f_try = float(objective(x_try))
            if np.isfinite(f_try) and f_try <= f + ARMIJO_C * float(g @ d):
                accepted = True
                break
            alpha *= BACKTRACK
        if not accepted:
            break
        g_new = np.asarray(gradient(x_try), dtype=float).ravel()
        s = x_try - x
        y = g_new - g
        sy = float(s @ y)
        step = float(s @ s) / sy if sy > 0 else INITIAL_STEP
        step = min(max(step, 1e-12), 1e12)
        x, f, g = x_try, f_try, g_new
        pg = np.linalg.norm(box.project(x - g) - x)
        converged = pg <= step_tol + rel_tol * abs(f)
    return BoxResult(x=x, fun=f, iterations=it, converged=bool(converged), pg_norm=float(pg))
