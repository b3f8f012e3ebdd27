"""Data-enabled predictive control for LTI plants.

A recorded input/output sequence, arranged in block-Hankel matrices, stands
in for the state-space model: every length-L trajectory of a minimal LTI
plant is a linear combination of the Hankel columns, provided the recorded
input is persistently exciting of order ``L + n``.
"""
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .errors import (
    InconsistentHistoryError,
    InsufficientDataError,
    InvalidInputError,
    PreconditionError,
)
from .numerics import (
    BoxConstraint,
    minimize_box,
    numerical_rank,
    pseudo_inverse,
    solve_equality_qp,
)

RANK_TOL = 1e-10
NU_RIDGE = 1e-10
PENALTY_FACTOR = 10.0
PENALTY_ROUNDS = 5


def _as_signal(signal):
    s = np.asarray(signal, dtype=float)
    if s.ndim == 1:
        s = s[:, None]
    if s.ndim != 2:
        raise InvalidInputError("signal must be a sequence of vectors")
    return s


def build_hankel(signal, L: int) -> np.ndarray:
    """Block-Hankel matrix of depth ``L``; column ``j`` is the window starting at ``j``.

    Raises:
        InsufficientDataError: if the signal is shorter than ``L``.
    """
    s = _as_signal(signal)
    d, q = s.shape
    if L < 1:
        raise InvalidInputError("depth must be at least 1")
    if d < L:
        raise InsufficientDataError(f"need at least {L} samples, got {d}")
    cols = d - L + 1
    H = np.empty((L * q, cols))
    for j in range(cols):
        H[:, j] = s[j:j + L].ravel()
    return H


def is_persistently_exciting(u, order: int, tol: float = RANK_TOL) -> bool:
    s = _as_signal(u)
    d, m = s.shape
    if d < order or d - order + 1 < order * m:
        return False
    return numerical_rank(build_hankel(s, order), tol) == order * m


@dataclass(frozen=True)
class HankelStack:
    u: np.ndarray
    y: np.ndarray
    depth: int
    Hu: np.ndarray = field(repr=False)
    Hy: np.ndarray = field(repr=False)

    @classmethod
    def from_data(cls, u, y, depth: int):
        u = _as_signal(u)
        y = _as_signal(y)
        if u.shape[0] != y.shape[0]:
            raise InvalidInputError("input and output records differ in length")
        return cls(u=u, y=y, depth=depth, Hu=build_hankel(u, depth), Hy=build_hankel(y, depth))

    @property
    def m(self):
        return self.u.shape[1]

    @property
    def p(self):
        return self.y.shape[1]

    @property
    def columns(self):
        return self.Hu.shape[1]

    @property
    def stacked(self):
        return np.vstack([self.Hu, self.Hy])

    def permuted(self, perm):
        """Same stack with columns reordered (the span is unchanged)."""
        return HankelStack(u=self.u, y=self.y, depth=self.depth, Hu=self.Hu[:, perm], Hy=self.Hy[:, perm])


def _state_dim(stack):
    # Plants here have state (x1, x2) with y = x1, so n = 2 * (output dim).
    return 2 * stack.p


def fl_explain(stack: HankelStack, u_test, y_test, tol: float = 1e-8):
    """Find ``nu`` with ``[u; y] = [Hu; Hy] nu`` or return ``None`` if none exists.

    Raises:
        PreconditionError: if the stored input is not persistently exciting of
            order ``depth + n``.
    """
    order = stack.depth + _state_dim(stack)
    if not is_persistently_exciting(stack.u, order):
        raise PreconditionError(f"stored input is not persistently exciting of order {order}")
    u_test = _as_signal(u_test)
    y_test = _as_signal(y_test)
    if u_test.shape[0] != stack.depth or y_test.shape[0] != stack.depth:
        raise InvalidInputError(f"test trajectory must have length {stack.depth}")
    w = np.concatenate([u_test.ravel(), y_test.ravel()])
    H = stack.stacked
    nu = pseudo_inverse(H, RANK_TOL) @ w
    residual = np.linalg.norm(H @ nu - w)
    if residual <= tol * (1.0 + np.linalg.norm(w)):
        return nu
    return None


def fl_residual(stack: HankelStack, u_test, y_test) -> float:
    """Least-squares residual of explaining the trajectory by the Hankel span."""
    w = np.concatenate([_as_signal(u_test).ravel(), _as_signal(y_test).ravel()])
    H = stack.stacked
    nu = pseudo_inverse(H, RANK_TOL) @ w
    return float(np.linalg.norm(H @ nu - w))


def fl_generate(stack: HankelStack, nu):
    nu = np.asarray(nu, dtype=float).ravel()
    if nu.size != stack.columns:
        raise InvalidInputError(f"nu must have {stack.columns} entries")
    u = (stack.Hu @ nu).reshape(stack.depth, stack.m)
    y = (stack.Hy @ nu).reshape(stack.depth, stack.p)
    return u, y


@dataclass(frozen=True)
class DeepcConfig:
    horizon: int
    Q: np.ndarray
    R: np.ndarray
    u_max: float = np.inf

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        for name, M in (("Q", Q), ("R", R)):
            if not np.allclose(M, M.T) or np.linalg.eigvalsh(M).min() <= 0:
                raise InvalidInputError(f"{name} must be symmetric positive definite")
        if self.horizon < 1:
            raise InvalidInputError("horizon must be at least 1")
        if not self.u_max > 0:
            raise InvalidInputError("u_max must be positive")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)

    @property
    def m(self):
        return self.R.shape[0]

    @property
    def past_len(self):
        return 2 * self.m

    @property
    def depth(self):
        return self.horizon + self.past_len

    @property
    def pe_order(self):
        return self.horizon + 4 * self.m


@dataclass
class DeepcSolution:
    nu: np.ndarray
    u_pred: np.ndarray
    y_pred: np.ndarray
    objective: float
    method: str

    @property
    def first_input(self):
        return self.u_pred[0]


def _compressed_constraints(M, b, tol=RANK_TOL):
    """Replace ``M nu = b`` by an equivalent full-row-rank system.

    Raises:
        InconsistentHistoryError: if ``b`` is not in the range of ``M``.
    """
    U, s, _ = np.linalg.svd(M, full_matrices=False)
    r = int(np.count_nonzero(s > tol * s[0])) if s.size and s[0] > 0 else 0
    Ur = U[:, :r]
    bc = Ur.T @ b
    if np.linalg.norm(Ur @ bc - b) > 1e-8 * (1.0 + np.linalg.norm(b)):
        raise InconsistentHistoryError("past window is not a trajectory of the recorded system")
    return Ur.T @ M, bc


def deepc_step(
    stack: HankelStack,
    u_past,
    y_past,
    y_ref,
    cfg: DeepcConfig,
    method: str = "auto",
    warm_start=None,
) -> DeepcSolution:
    """Solve the receding-horizon problem for one sample.

    The past window covers samples ``k-2m+1 .. k`` and the prediction covers
    ``k+1 .. k+N``; the stack depth must therefore be ``N + 2m``. ``y_ref``
    holds the N reference outputs for ``k+1 .. k+N``.

    ``method`` selects the solver path: ``"kkt"`` ignores the input bound,
    ``"condensed"`` always uses the reduced bounded problem, ``"auto"`` uses the
    KKT solution when it already respects the bound.

    Raises:
        InconsistentHistoryError: if the past window cannot be pinned.
    """
    N, m, T = cfg.horizon, cfg.m, cfg.past_len
    if stack.depth != cfg.depth:
        raise InvalidInputError(f"stack depth {stack.depth} != N + 2m = {cfg.depth}")
    p = stack.p
    u_past = _as_signal(u_past)
    y_past = _as_signal(y_past)
    if u_past.shape != (T, m) or y_past.shape != (T, p):
        raise InvalidInputError(f"past window must have exactly {T} samples")
    r = _as_signal(y_ref)
    if r.shape != (N, p):
        raise InvalidInputError(f"reference window must have {N} samples")
    r = r.ravel()

    Up, Uf = stack.Hu[: T * m], stack.Hu[T * m:]
    Yp, Yf = stack.Hy[: T * p], stack.Hy[T * p:]
    Qbar = np.kron(np.eye(N), cfg.Q)
    Rbar = np.kron(np.eye(N), cfg.R)
    c = stack.columns

    hess = 2.0 * (Yf.T @ Qbar @ Yf + Uf.T @ Rbar @ Uf + NU_RIDGE * np.eye(c))
    lin = -2.0 * Yf.T @ Qbar @ r
    w_past = np.concatenate([u_past.ravel(), y_past.ravel()])
    A_pin, b_pin = _compressed_constraints(np.vstack([Up, Yp]), w_past)

    def objective_of(nu):
        ey = Yf @ nu - r
        uf = Uf @ nu
        return float(ey @ Qbar @ ey + uf @ Rbar @ uf)

    def finish(nu, used):
        pin = np.linalg.norm(np.vstack([Up, Yp]) @ nu - w_past)
        if pin > 1e-8 * (1.0 + np.linalg.norm(w_past)):
            raise InconsistentHistoryError(f"pinning residual {pin:.3e}")
        return DeepcSolution(
            nu=nu,
            u_pred=(Uf @ nu).reshape(N, m),
            y_pred=(Yf @ nu).reshape(N, p),
            objective=objective_of(nu),
            method=used,
        )

    if method in ("auto", "kkt"):
        nu = solve_equality_qp(hess, lin, A_pin, b_pin)
        uf = (Uf @ nu).reshape(N, m)
        if method == "kkt" or np.all(np.linalg.norm(uf, axis=1) <= cfg.u_max):
            return finish(nu, "kkt")

    # Reduced problem in the future inputs: y_f = Yf M^+ [w_past; u_f] is affine in u_f.
    M = np.vstack([Up, Yp, Uf])
    M_pinv = pseudo_inverse(M, RANK_TOL)
    npast = w_past.size
    Phi = Yf @ M_pinv[:, npast:]
    offset = Yf @ M_pinv[:, :npast] @ w_past - r
    P = 2.0 * (Phi.T @ Qbar @ Phi + Rbar)
    q = 2.0 * Phi.T @ Qbar @ offset
    const = float(offset @ Qbar @ offset)

    def quad(z):
        return 0.5 * float(z @ P @ z) + float(q @ z) + const

    def quad_grad(z):
        return P @ z + q

    z0 = np.zeros(N * m) if warm_start is None else np.asarray(warm_start, dtype=float).ravel()
    scale = max(1.0, float(np.abs(P).max()))
    if m == 1:
        box = BoxConstraint.symmetric(cfg.u_max, N)
        res = minimize_box(quad, quad_grad, box, z0, max_iters=5000, step_tol=1e-10 * scale)
        z = res.x
    else:
        z = z0.copy()
        rho = scale
        free = BoxConstraint.unbounded(N * m)
        for _ in range(PENALTY_ROUNDS):
            def pen(z, rho=rho):
                excess = np.maximum(np.linalg.norm(z.reshape(N, m), axis=1) - cfg.u_max, 0.0)
                return quad(z) + rho * float(excess @ excess)

            def pen_grad(z, rho=rho):
                Z = z.reshape(N, m)
                norms = np.linalg.norm(Z, axis=1)
                excess = np.maximum(norms - cfg.u_max, 0.0)
                coef = np.where(norms > 0, 2.0 * rho * excess / np.maximum(norms, 1e-300), 0.0)
                return quad_grad(z) + (coef[:, None] * Z).ravel()

            z = minimize_box(pen, pen_grad, free, z, max_iters=5000, step_tol=1e-10 * scale).x
            rho *= PENALTY_FACTOR
        Z = z.reshape(N, m)
        norms = np.linalg.norm(Z, axis=1)
        shrink = np.where(norms > cfg.u_max, cfg.u_max / np.maximum(norms, 1e-300), 1.0)
        z = (Z * shrink[:, None]).ravel()

    A_all, b_all = _compressed_constraints(M, np.concatenate([w_past, z]))
    nu = solve_equality_qp(hess, lin, A_all, b_all)
    return finish(nu, "condensed")


class DeepcController:
    """Receding-horizon DeePC with a rolling past window.

    Call with the sample index ``k`` and the measured output ``y(k)``; the
    returned input ``u(k)`` is held until the next call. Until ``2m`` past
    input/output pairs exist the controller returns zero.

    ``reference`` is either a callable ``k -> y_ref(k)`` or an array indexed by
    ``k`` (the last row is repeated beyond its end).
    """

    def __init__(self, stack: HankelStack, cfg: DeepcConfig, reference: Union[Callable, np.ndarray]):
        order = cfg.pe_order
        if not is_persistently_exciting(stack.u, order):
            raise PreconditionError(f"recorded input is not persistently exciting of order {order}")
        if stack.depth != cfg.depth:
            raise InvalidInputError(f"stack depth must be N + 2m = {cfg.depth}")
        self.stack = stack
        self.cfg = cfg
        self.reference = reference
        self._u_hist = []
        self._y_hist = []
        self.mu = np.zeros(cfg.m)
        self.last_solution: Optional[DeepcSolution] = None

    def _ref(self, k):
        if callable(self.reference):
            return np.atleast_1d(np.asarray(self.reference(k), dtype=float))
        ref = _as_signal(self.reference)
        return ref[min(k, len(ref) - 1)]

    def __call__(self, k: int, y_k):
        T = self.cfg.past_len
        y_k = np.atleast_1d(np.asarray(y_k, dtype=float))
        if len(self._u_hist) >= T:
            # Past window ends at k-1; the prediction starts at k.
            u_past = np.array(self._u_hist[-T:])
            y_past = np.array(self._y_hist[-T:])
            ref = np.array([self._ref(k + i) for i in range(self.cfg.horizon)])
            warm = None
            if self.last_solution is not None:
                prev = self.last_solution.u_pred
                warm = np.vstack([prev[1:], prev[-1:]]).ravel()
            sol = deepc_step(self.stack, u_past, y_past, ref, self.cfg, warm_start=warm)
            self.last_solution = sol
            self.mu = sol.first_input.copy()
        else:
            self.mu = np.zeros(self.cfg.m)
        self._u_hist.append(self.mu.copy())
        self._y_hist.append(y_k.copy())
        return self.mu.copy()
