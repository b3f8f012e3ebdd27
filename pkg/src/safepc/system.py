"""Control-affine plants of relative degree two, discrete LTI plants, and simulation."""
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import (
    FunnelViolationError,
    InvalidInputError,
    SafeguardViolationError,
)
from .numerics import numerical_rank, rk4_step


@dataclass(frozen=True)
class ControlAffineSystem:
    """``x1' = x2``, ``x2' = g0(x1, x2) + G(x1, x2) u`` with output ``y = x1``.

    ``drift`` maps ``(x1, x2)`` to an m-vector and ``input_matrix`` maps
    ``(x1, x2)`` to the m-by-m matrix ``[g_1 ... g_m]``.
    """

    m: int
    drift: Callable
    input_matrix: Callable
    name: str = "control-affine"

    @property
    def n(self):
        return 2 * self.m

    def split(self, x):
        x = np.asarray(x, dtype=float)
        return x[: self.m], x[self.m:]

    def rhs(self, x, u):
        x1, x2 = self.split(x)
        u = np.asarray(u, dtype=float).reshape(self.m)
        acc = np.asarray(self.drift(x1, x2), dtype=float).reshape(self.m)
        acc = acc + np.asarray(self.input_matrix(x1, x2), dtype=float).reshape(self.m, self.m) @ u
        return np.concatenate([x2, acc])

    def output(self, x):
        return np.asarray(x, dtype=float)[: self.m].copy()

    def check_control_direction(self, points, directions) -> bool:
        """Spot-check ``<z, G(x) z> > 0`` on the given states and directions."""
        for x in points:
            x1, x2 = self.split(x)
            G = np.asarray(self.input_matrix(x1, x2), dtype=float).reshape(self.m, self.m)
            for z in directions:
                z = np.asarray(z, dtype=float).reshape(self.m)
                if not np.any(z):
                    continue
                if float(z @ G @ z) <= 0.0:
                    return False
        return True


def vdp_field(x, u, nu=0.1):
    """Forced Van der Pol vector field ``(x2, nu (1 - x1^2) x2 - x1 + u)``."""
    x1, x2 = float(x[0]), float(x[1])
    u = float(np.asarray(u, dtype=float).ravel()[0])
    return np.array([x2, nu * (1.0 - x1 * x1) * x2 - x1 + u])


def van_der_pol(nu: float = 0.1) -> ControlAffineSystem:
    return ControlAffineSystem(
        m=1,
        drift=lambda x1, x2: nu * (1.0 - x1 * x1) * x2 - x1,
        input_matrix=lambda x1, x2: np.ones((1, 1)),
        name=f"van-der-pol(nu={nu})",
    )


def sampled_flow(sys: ControlAffineSystem, x, u_const, dt: float, substeps: int = 10) -> np.ndarray:
    """Flow of the plant over ``[0, dt]`` under the constant input ``u_const``."""
    if not dt > 0:
        raise InvalidInputError("dt must be positive")
    if substeps < 1:
        raise InvalidInputError("substeps must be at least 1")
    u = np.asarray(u_const, dtype=float).reshape(sys.m)
    h = dt / substeps
    x = np.asarray(x, dtype=float)

    def f(t, z):
        return sys.rhs(z, u)

    t = 0.0
    for _ in range(substeps):
        x = rk4_step(f, t, x, h)
        t += h
    return x


@dataclass
class Trajectory:
    """Logged closed-loop signals on a uniform grid.

    ``inputs[k]`` is the input evaluated at ``t[k]`` and is therefore one row
    shorter than ``states``. ``diagnostics`` maps names to per-sample arrays.
    """

    t: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    outputs: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.t)


def _diag_norms(controller):
    diag = getattr(controller, "diagnostics", None) or {}
    return diag.get("e1_norm", np.nan), diag.get("e2_norm", np.nan)


def simulate_closed_loop(
    sys: ControlAffineSystem,
    controller: Callable,
    x0,
    t_end: float,
    dt_log: float = 0.05,
    substeps: int = 10,
    on_sample: Optional[Callable] = None,
    t0: float = 0.0,
) -> Trajectory:
    """Integrate the plant under continuous feedback ``u = controller(t, x)``.

    The controller is evaluated at every RK4 stage, so continuous-time feedback
    laws see the state they act on. ``on_sample(k, t, x)`` runs at each log
    instant before the next interval is integrated; sampled-data components
    (zero-order-hold predictive control, data collection) hook in there.

    If the controller exposes a ``diagnostics`` dict it is copied into the
    trajectory at every log instant.

    Raises:
        SafeguardViolationError: if the controller reports a funnel violation.
            The partial trajectory is attached to the exception.
    """
    if not dt_log > 0:
        raise InvalidInputError("dt_log must be positive")
    n_log = int(round((t_end - t0) / dt_log))
    h = dt_log / substeps
    x = np.asarray(x0, dtype=float).copy()

    ts, xs, us, diags = [], [], [], []
    last_query = [None]

    def field_fn(t, z):
        last_query[0] = (t, z)
        return sys.rhs(z, controller(t, z))

    def snapshot(t):
        diag = getattr(controller, "diagnostics", None)
        diags.append(dict(diag) if diag else {})

    def build():
        keys = sorted({k for d in diags for k in d})
        diag_arrays = {k: np.array([d.get(k, np.nan) for d in diags], dtype=float) for k in keys}
        states = np.array(xs)
        return Trajectory(
            t=np.array(ts),
            states=states,
            inputs=np.array(us[: max(len(xs) - 1, 0)]).reshape(-1, sys.m),
            outputs=states[:, : sys.m].copy(),
            diagnostics=diag_arrays,
        )

    t = t0
    try:
        for k in range(n_log + 1):
            t = t0 + k * dt_log
            if on_sample is not None:
                on_sample(k, t, x)
            last_query[0] = (t, x)
            u = np.asarray(controller(t, x), dtype=float).reshape(sys.m)
            ts.append(t)
            xs.append(x.copy())
            snapshot(t)
            if k == n_log:
                break
            us.append(u)
            for j in range(substeps):
                x = rk4_step(field_fn, t + j * h, x, h)
    except FunnelViolationError as exc:
        e1, e2 = _diag_norms(controller)
        if exc.which == "e1":
            e1 = exc.norm
        else:
            e2 = exc.norm
        t_fail = exc.t if exc.t is not None else t
        if last_query[0] is not None and (not ts or last_query[0][0] > ts[-1]):
            # Final row: the stage state at which the violation was detected.
            # The controller produced no input there, so its diagnostics are NaN.
            ts.append(float(last_query[0][0]))
            xs.append(np.array(last_query[0][1], dtype=float))
            diags.append({})
        raise SafeguardViolationError(t_fail, e1, e2, trajectory=build() if xs else None) from exc
    return build()


@dataclass(frozen=True)
class DiscreteLti:
    """``x+ = A x + B u``, ``y = C x`` with ``A = [0 I; A1 A2]``, ``B = [0; B1]``."""

    A1: np.ndarray
    A2: np.ndarray
    B1: np.ndarray

    def __post_init__(self):
        A1 = np.atleast_2d(np.asarray(self.A1, dtype=float))
        A2 = np.atleast_2d(np.asarray(self.A2, dtype=float))
        B1 = np.atleast_2d(np.asarray(self.B1, dtype=float))
        m = A1.shape[0]
        if not (A1.shape == A2.shape == B1.shape == (m, m)):
            raise InvalidInputError("A1, A2, B1 must all be m-by-m")
        if np.linalg.eigvalsh(0.5 * (B1 + B1.T)).min() <= 0:
            raise InvalidInputError("B1 must be positive definite")
        object.__setattr__(self, "A1", A1)
        object.__setattr__(self, "A2", A2)
        object.__setattr__(self, "B1", B1)

    @property
    def m(self):
        return self.A1.shape[0]

    @property
    def n(self):
        return 2 * self.m

    @property
    def A(self):
        m = self.m
        return np.block([[np.zeros((m, m)), np.eye(m)], [self.A1, self.A2]])

    @property
    def B(self):
        return np.vstack([np.zeros((self.m, self.m)), self.B1])

    @property
    def C(self):
        return np.hstack([np.eye(self.m), np.zeros((self.m, self.m))])

    def controllability_matrix(self):
        A, B = self.A, self.B
        blocks = [B]
        for _ in range(self.n - 1):
            blocks.append(A @ blocks[-1])
        return np.hstack(blocks)

    def observability_matrix(self):
        A, C = self.A, self.C
        blocks = [C]
        for _ in range(self.n - 1):
            blocks.append(blocks[-1] @ A)
        return np.vstack(blocks)

    def is_minimal(self, tol=1e-10):
        return (numerical_rank(self.controllability_matrix(), tol) == self.n
                and numerical_rank(self.observability_matrix(), tol) == self.n)


def lti_step(sys: DiscreteLti, x, u):
    """Return ``(A x + B u, C x)``."""
    x = np.asarray(x, dtype=float).reshape(sys.n)
    u = np.asarray(u, dtype=float).reshape(sys.m)
    return sys.A @ x + sys.B @ u, sys.C @ x


def simulate_lti(sys: DiscreteLti, x0, inputs):
    """Roll out the LTI plant; returns ``(states, outputs)`` with one row per input."""
    inputs = np.asarray(inputs, dtype=float).reshape(-1, sys.m)
    x = np.asarray(x0, dtype=float).reshape(sys.n)
    states, outputs = [], []
    for u in inputs:
        states.append(x)
        x, y = lti_step(sys, x, u)
        outputs.append(y)
    return np.array(states).reshape(-1, sys.n), np.array(outputs).reshape(-1, sys.m)


def random_minimal_lti(rng, m: int = 1, radius: float = 0.95) -> DiscreteLti:
    """Random stable plant with the block structure above.

    For ``m = 1`` the poles are drawn inside the disc of the given radius so
    that long data records stay well scaled.
    """
    if m == 1:
        if rng.random() < 0.5:
            r1, r2 = rng.uniform(-radius, radius, size=2)
            a2, a1 = r1 + r2, -r1 * r2
        else:
            rad = radius * np.sqrt(rng.random())
            ang = rng.uniform(0, np.pi)
            a2, a1 = 2 * rad * np.cos(ang), -rad * rad
        b1 = rng.uniform(0.2, 2.0)
        return DiscreteLti([[a1]], [[a2]], [[b1]])
    A1 = rng.normal(scale=0.3 / np.sqrt(m), size=(m, m))
    A2 = rng.normal(scale=0.3 / np.sqrt(m), size=(m, m))
    M = rng.normal(size=(m, m))
    B1 = M @ M.T + m * np.eye(m)
    return DiscreteLti(A1, A2, B1)
