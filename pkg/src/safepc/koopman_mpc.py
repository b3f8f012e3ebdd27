"""Receding-horizon control on a bilinear EDMD surrogate.

The optimal control problem is solved by single shooting: the decision
variable is the stacked control sequence, the surrogate is rolled out
forward, and the gradient is accumulated backwards through the rollout.
"""
import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numba import njit

from .edmd import BilinearSurrogate
from .errors import DivergedError, InvalidInputError, SurrogateBlowupError
from .numerics import ARMIJO_C, BACKTRACK, INITIAL_STEP, MAX_BACKTRACKS, BoxConstraint, BoxResult

logger = logging.getLogger(__name__)

OCP_MAX_ITERS = 500
OCP_TOL = 1e-6


@dataclass(frozen=True)
class StageCost:
    """``l(k, x, u) = |x - x_ref(k)|_Q^2 + |u|_R^2``; ``reference`` maps a sample index to a state."""

    Q: np.ndarray
    R: np.ndarray
    reference: Callable = None

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        for name, M in (("Q", Q), ("R", R)):
            if not np.allclose(M, M.T):
                raise InvalidInputError(f"{name} must be symmetric")
            try:
                np.linalg.cholesky(M)
            except np.linalg.LinAlgError:
                raise InvalidInputError(f"{name} must be positive definite") from None
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)
        if self.reference is None:
            n = Q.shape[0]
            object.__setattr__(self, "reference", lambda k: np.zeros(n))

    def x_ref(self, k):
        return np.asarray(self.reference(k), dtype=float)


def stage_cost(cost: StageCost, k: int, x, u) -> float:
    dx = np.asarray(x, dtype=float) - cost.x_ref(k)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    return float(dx @ cost.Q @ dx + u @ cost.R @ u)


@dataclass
class OcpProblem:
    surrogate: BilinearSurrogate
    horizon: int
    box: BoxConstraint
    x0: np.ndarray
    k: int = 0

    def __post_init__(self):
        if self.horizon < 2:
            raise InvalidInputError("prediction horizon must be at least 2")
        self.x0 = np.asarray(self.x0, dtype=float).ravel()
        if not np.all(np.isfinite(self.x0)):
            raise InvalidInputError("initial state must be finite")
        if self.box.lower.size != self.surrogate.m:
            raise InvalidInputError("input box dimension must match the surrogate input dimension")

    @property
    def m(self):
        return self.surrogate.m

    @property
    def stacked_box(self):
        return BoxConstraint(np.tile(self.box.lower, self.horizon), np.tile(self.box.upper, self.horizon))


@njit(cache=True)
def _lift_into(x, E, pw, psi):
    """Fill ``pw[p, j] = x_j**p`` and the monomials ``psi`` in place."""
    n = x.size
    for j in range(n):
        pw[0, j] = 1.0
        for p in range(1, pw.shape[0]):
            pw[p, j] = pw[p - 1, j] * x[j]
    for r in range(E.shape[0]):
        v = 1.0
        for j in range(n):
            v *= pw[E[r, j], j]
        psi[r] = v


@njit(cache=True)
def _shoot(A0, D, E, deg, x0, U, refs, Q, R, want_grad):
    """Rollout, summed stage cost and (optionally) its adjoint gradient.

    Returns ``(f, states, gradient, finite)``; ``f`` is ``inf`` when the
    rollout blows up.
    """
    N, m = U.shape
    n, M1 = A0.shape
    xs = np.empty((N + 1, n))
    psis = np.empty((N, M1))
    pws = np.empty((N, deg + 1, n))
    xs[0] = x0
    f = 0.0
    for i in range(N):
        _lift_into(xs[i], E, pws[i], psis[i])
        for a in range(n):
            v = 0.0
            for r in range(M1):
                c = A0[a, r]
                for k in range(m):
                    c += U[i, k] * D[k, a, r]
                v += c * psis[i, r]
            xs[i + 1, a] = v
        for a in range(n):
            da = xs[i, a] - refs[i, a]
            for b in range(n):
                f += da * Q[a, b] * (xs[i, b] - refs[i, b])
        for k in range(m):
            for l in range(m):
                f += U[i, k] * R[k, l] * U[i, l]
        for a in range(n):
            if not np.isfinite(xs[i + 1, a]):
                return np.inf, xs, np.zeros(N * m), False
    G = np.zeros((N, m))
    if want_grad:
        lam = np.zeros(n)  # dJ/dx_{i+1}; the terminal state carries no cost
        w = np.empty(M1)
        for i in range(N - 1, -1, -1):
            # x_{i+1} = A_i psi(x_i): d/du_k = D_k psi(x_i), d/dx_i = A_i Dpsi(x_i)
            for k in range(m):
                g = 0.0
                for l in range(m):
                    g += 2.0 * R[k, l] * U[i, l]
                if i < N - 1:
                    for a in range(n):
                        da = 0.0
                        for r in range(M1):
                            da += D[k, a, r] * psis[i, r]
                        g += da * lam[a]
                G[i, k] = g
            if i == 0:
                break
            # w = A_i^T lam, then lam <- 2 Q (x_i - r_i) + Dpsi(x_i)^T w
            for r in range(M1):
                v = 0.0
                for a in range(n):
                    c = A0[a, r]
                    for k in range(m):
                        c += U[i, k] * D[k, a, r]
                    v += c * lam[a]
                w[r] = v
            pw = pws[i]
            new = np.zeros(n)
            for j in range(n):
                acc = 0.0
                for b in range(n):
                    acc += 2.0 * Q[j, b] * (xs[i, b] - refs[i, b])
                for r in range(M1):
                    e = E[r, j]
                    if e == 0 or w[r] == 0.0:
                        continue
                    v = float(e)
                    for l in range(n):
                        v *= pw[E[r, l] - 1, l] if l == j else pw[E[r, l], l]
                    acc += v * w[r]
                new[j] = acc
            lam = new
    return f, xs, G.ravel(), True


@njit(cache=True)
def _box_descent(A0, D, E, deg, x0, refs, Q, R, lower, upper, z0, max_iters, step_tol, rel_tol):
    """Compiled twin of ``numerics.minimize_box`` specialised to the shooting objective.

    Same iteration: Armijo backtracking along the projection arc with a
    Barzilai-Borwein trial step. Returns ``(z, f, iterations, converged, pg_norm)``.
    """
    N = refs.shape[0]
    m = z0.size // N
    z = np.minimum(np.maximum(z0, lower), upper)
    f, _, g, _ = _shoot(A0, D, E, deg, x0, z.reshape(N, m), refs, Q, R, True)
    pg = np.linalg.norm(np.minimum(np.maximum(z - g, lower), upper) - z)
    converged = pg <= step_tol + rel_tol * abs(f)
    step = INITIAL_STEP
    it = 0
    while not converged and it < max_iters:
        it += 1
        alpha = step
        accepted = False
        z_try = z
        f_try = f
        for _ in range(MAX_BACKTRACKS):
            z_try = np.minimum(np.maximum(z - alpha * g, lower), upper)
            f_try = _shoot(A0, D, E, deg, x0, z_try.reshape(N, m), refs, Q, R, False)[0]
            if np.isfinite(f_try) and f_try <= f + ARMIJO_C * (g @ (z_try - z)):
                accepted = True
                break
            alpha *= BACKTRACK
        if not accepted:
            break
        g_new = _shoot(A0, D, E, deg, x0, z_try.reshape(N, m), refs, Q, R, True)[2]
        s = z_try - z
        y = g_new - g
        sy = s @ y
        step = (s @ s) / sy if sy > 0 else INITIAL_STEP
        step = min(max(step, 1e-12), 1e12)
        z, f, g = z_try, f_try, g_new
        pg = np.linalg.norm(np.minimum(np.maximum(z - g, lower), upper) - z)
        converged = pg <= step_tol + rel_tol * abs(f)
    return z, f, it, converged, pg


class _Shooting:
    """Objective and gradient callables for one problem instance."""

    def __init__(self, problem: OcpProblem, cost: StageCost):
        sur = problem.surrogate
        sel = sur.selector
        self.N = problem.horizon
        self.m = problem.m
        self.x0 = np.ascontiguousarray(problem.x0, dtype=float)
        self.A0 = np.ascontiguousarray(sur.K0[sel])
        self.D = np.ascontiguousarray(np.array([Dk[sel] for Dk in sur.deltas]))  # (m, n, M+1)
        self.E = np.ascontiguousarray(sur.dictionary.exponents, dtype=np.int64)
        self.deg = int(sur.dictionary.max_degree)
        self.Q = np.ascontiguousarray(cost.Q)
        self.R = np.ascontiguousarray(cost.R)
        self.refs = np.ascontiguousarray(
            np.array([cost.x_ref(problem.k + i) for i in range(self.N)], dtype=float))

    def _run(self, z, want_grad):
        U = np.ascontiguousarray(z, dtype=float).reshape(self.N, self.m)
        return _shoot(self.A0, self.D, self.E, self.deg, self.x0, U, self.refs, self.Q, self.R, want_grad)

    def rollout(self, U):
        f, xs, _, finite = self._run(np.asarray(U, dtype=float).ravel(), False)
        if not finite:
            bad = int(np.flatnonzero(~np.isfinite(xs).all(axis=1))[0])
            raise SurrogateBlowupError(bad)
        return xs

    def objective(self, z):
        return float(self._run(z, False)[0])

    def gradient(self, z):
        return self._run(z, True)[2]

    def descend(self, box: BoxConstraint, z0, max_iters, tol) -> BoxResult:
        z, f, it, conv, pg = _box_descent(
            self.A0, self.D, self.E, self.deg, self.x0, self.refs, self.Q, self.R,
            box.lower, box.upper, np.ascontiguousarray(z0, dtype=float), max_iters, tol, tol)
        return BoxResult(x=z, fun=float(f), iterations=int(it), converged=bool(conv), pg_norm=float(pg))


def rollout(problem: OcpProblem, controls) -> np.ndarray:
    """Predicted states ``x(0..N)``; controls outside the box are clamped with a warning.

    Raises:
        SurrogateBlowupError: if a prediction becomes non-finite.
    """
    U = np.asarray(controls, dtype=float).reshape(problem.horizon, problem.m)
    clamped = np.clip(U, problem.box.lower, problem.box.upper)
    if not np.array_equal(clamped, U):
        warnings.warn("controls outside the input box were clamped", RuntimeWarning, stacklevel=2)
    shoot = _Shooting(problem, StageCost(np.eye(problem.x0.size), np.eye(problem.m)))
    return shoot.rollout(clamped).copy()


@dataclass
class OcpSolution:
    controls: np.ndarray
    objective: float
    iterations: int
    converged: bool
    active_bounds: int
    restarted: bool = False


def ocp_objective(problem: OcpProblem, cost: StageCost, controls) -> float:
    return _Shooting(problem, cost).objective(np.asarray(controls, dtype=float).ravel())


def ocp_gradient(problem: OcpProblem, cost: StageCost, controls) -> np.ndarray:
    return _Shooting(problem, cost).gradient(np.asarray(controls, dtype=float).ravel())


def solve_ocp(problem: OcpProblem, cost: StageCost, warm_start=None,
              max_iters: int = OCP_MAX_ITERS, tol: float = OCP_TOL) -> OcpSolution:
    """Minimise the summed stage cost over the control sequence inside the box.

    The solver starts from whichever of the warm start and the zero sequence
    (projected onto the box) has the lower objective, so the result is never
    worse than either.
    """
    shoot = _Shooting(problem, cost)
    box = problem.stacked_box
    zero = box.project(np.zeros(problem.horizon * problem.m))
    f_zero = shoot.objective(zero)
    start, restarted = zero, warm_start is not None
    if warm_start is not None:
        ws = box.project(np.asarray(warm_start, dtype=float).ravel())
        f_ws = shoot.objective(ws)
        if np.isfinite(f_ws) and f_ws <= f_zero:
            start, restarted = ws, False
    if not np.isfinite(shoot.objective(start)):
        raise DivergedError("surrogate rollout is non-finite from the zero control sequence")
    res = shoot.descend(box, start, max_iters, tol)
    U = res.x.reshape(problem.horizon, problem.m)
    active = int(np.count_nonzero((res.x <= box.lower) | (res.x >= box.upper)))
    return OcpSolution(U, res.fun, res.iterations, res.converged, active, restarted)


def mpc_step(problem: OcpProblem, cost: StageCost, previous_solution=None):
    """Return ``(mu, warm_start_for_next_sample, solution)``.

    The next warm start shifts the optimal sequence by one and repeats its last entry.
    """
    sol = solve_ocp(problem, cost, previous_solution)
    U = sol.controls
    shifted = np.vstack([U[1:], U[-1:]])
    return U[0].copy(), shifted, sol


@dataclass
class PredictionRecord:
    k: int
    model: Optional[int]
    mu: np.ndarray
    objective: float
    iterations: int
    active_bounds: int
    predicted: np.ndarray = field(repr=False, default=None)


class MpcController:
    """Zero-order-hold EDMD-MPC.

    ``provider()`` returns the current surrogate (or ``None`` before any model
    exists, in which case ``mu = 0``). It is queried at every sample, so the
    model may be refitted between samples.
    """

    def __init__(self, provider: Callable, cost: StageCost, dt: float, box: BoxConstraint,
                 horizon: int = 30, keep_predictions: bool = False):
        self.provider = provider
        self.cost = cost
        self.dt = dt
        self.box = box
        self.horizon = horizon
        self.keep_predictions = keep_predictions
        self.mu = np.zeros(box.lower.size)
        self._warm = None
        self.log = []

    def sample(self, k: int, x):
        sur = self.provider()
        if sur is None:
            self.mu = np.zeros(self.box.lower.size)
            self.log.append(PredictionRecord(k, None, self.mu.copy(), np.nan, 0, 0))
            return self.mu.copy()
        problem = OcpProblem(sur, self.horizon, self.box, x, k)
        mu, self._warm, sol = mpc_step(problem, self.cost, self._warm)
        self.mu = mu
        pred = rollout(problem, sol.controls) if self.keep_predictions else None
        self.log.append(PredictionRecord(k, id(sur), mu.copy(), sol.objective, sol.iterations,
                                         sol.active_bounds, pred))
        return mu.copy()

    def __call__(self, t, x=None):
        """Held value on ``[k dt, (k+1) dt)``."""
        return self.mu.copy()
