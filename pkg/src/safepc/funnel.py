"""Model-free funnel safeguard and the two-component control law.

The safeguard acts on the auxiliary errors

    e1 = sigma(t) * (y - y_ref)
    e2 = sigma(t) * (dy - dy_ref) + e1 / (1 - |e1|^2)

with feedback ``u_fc = -e2 / (1 - |e2|^2)``, scaled by a dwell-time
activation gain before being added to the predictive input ``mu``.
"""
from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import FunnelViolationError, InvalidInputError

# Boundary guard: exact arithmetic never gets here, so reaching it means the
# integration is under-resolved.
SINGULARITY_MARGIN = 1e-9
TIME_SLACK = 1e-9


def paper_sigma(t: float, switch: float = 4.0) -> float:
    """Funnel weight with radius 2.3 up to ``switch``, then shrinking to radius 0.3."""
    if t <= switch:
        return 1.0 / 2.3
    return 1.0 / (2.0 * np.exp(-2.0 * (t - switch)) + 0.3)


@dataclass(frozen=True)
class FunnelFunction:
    """Positive weight ``sigma(t)``; the admissible error radius is ``1 / sigma(t)``."""

    evaluate: Callable[[float], float]
    tag: str = "custom"

    def __call__(self, t):
        return float(self.evaluate(t))

    def radius(self, t):
        return 1.0 / self(t)

    @classmethod
    def constant(cls, value: float):
        if not value > 0:
            raise InvalidInputError("funnel weight must be positive")
        value = float(value)
        return cls(lambda t: value, tag="constant")

    @classmethod
    def benchmark(cls, switch: float = 4.0):
        """Shrinking funnel of the Van der Pol scenarios; ``switch`` delays the shrink."""
        switch = float(switch)
        if switch == 4.0:
            return cls(paper_sigma, tag="paper-example")
        return cls(lambda t: paper_sigma(t, switch), tag=f"paper-example(switch={switch})")

    @classmethod
    def piecewise(cls, breakpoints, values):
        """Piecewise-constant weight: ``values[i]`` on ``[breakpoints[i-1], breakpoints[i])``."""
        breakpoints = np.asarray(breakpoints, dtype=float)
        values = np.asarray(values, dtype=float)
        if values.size != breakpoints.size + 1 or np.any(values <= 0):
            raise InvalidInputError("need len(breakpoints) + 1 positive values")
        return cls(lambda t: float(values[np.searchsorted(breakpoints, t, side="right")]), tag="custom piecewise")

    def is_admissible(self, grid) -> bool:
        vals = np.array([self(t) for t in grid])
        return bool(np.all(np.isfinite(vals)) and vals.min() > 0)


@dataclass(frozen=True)
class ErrorState:
    e: np.ndarray
    de: np.ndarray
    e1: np.ndarray
    e2: np.ndarray


def error_vars(t, y, dy, y_ref, dy_ref, sigma) -> ErrorState:
    """Auxiliary funnel errors.

    Raises:
        FunnelViolationError: if ``|e1| >= 1`` (output outside the funnel).
    """
    s = float(sigma(t)) if callable(sigma) else float(sigma)
    e = np.atleast_1d(np.asarray(y, dtype=float) - np.asarray(y_ref, dtype=float))
    de = np.atleast_1d(np.asarray(dy, dtype=float) - np.asarray(dy_ref, dtype=float))
    e1 = s * e
    n1 = float(np.sqrt(e1 @ e1))
    if not n1 < 1.0 - SINGULARITY_MARGIN:
        raise FunnelViolationError("e1", n1, t)
    e2 = s * de + e1 / (1.0 - n1 * n1)
    return ErrorState(e=e, de=de, e1=e1, e2=e2)


def u_fc(e2) -> np.ndarray:
    """Funnel feedback ``-e2 / (1 - |e2|^2)``.

    Raises:
        FunnelViolationError: if ``|e2| >= 1``.
    """
    e2 = np.atleast_1d(np.asarray(e2, dtype=float))
    n2 = float(np.sqrt(e2 @ e2))
    if not n2 < 1.0 - SINGULARITY_MARGIN:
        raise FunnelViolationError("e2", n2)
    return -e2 / (1.0 - n2 * n2)


class ActivationWindow:
    """Sliding maximum of ``|e2|`` over the last ``tau`` time units.

    Samples are kept in a monotone deque, so each update is amortised O(1).
    Samples exactly ``tau`` old are still inside the window.
    """

    def __init__(self, tau: float, lam: float):
        if not tau > 0:
            raise InvalidInputError("dwell-time tau must be positive")
        if not 0.0 < lam < 1.0:
            raise InvalidInputError("activation threshold must lie in (0, 1)")
        self.tau = float(tau)
        self.lam = float(lam)
        self._buf = deque()
        self._last_t = -np.inf

    def update(self, t: float, e2_norm: float):
        if t < self._last_t:
            # Stage times from different substeps may disagree in the last bits.
            if self._last_t - t > TIME_SLACK * max(1.0, abs(t)):
                raise InvalidInputError(f"time went backwards: {t} < {self._last_t}")
            t = self._last_t
        self._last_t = t
        buf = self._buf
        while buf and buf[-1][1] <= e2_norm:
            buf.pop()
        buf.append((t, float(e2_norm)))
        self._prune(t)

    def _prune(self, t):
        horizon = t - self.tau - 1e-12 * max(1.0, abs(t))
        buf = self._buf
        while buf and buf[0][0] < horizon:
            buf.popleft()

    def window_max(self, t: Optional[float] = None) -> float:
        if t is not None:
            self._prune(t)
        return self._buf[0][1] if self._buf else 0.0

    def gain(self, t: Optional[float] = None) -> float:
        return max(0.0, self.window_max(t) - self.lam)

    def samples(self):
        return list(self._buf)


def activation(window: ActivationWindow, t: float, e2_norm: float) -> float:
    """Record ``(t, |e2|)`` and return ``max(0, max_{[t - tau, t]} |e2| - lambda)``."""
    window.update(t, e2_norm)
    return window.gain(t)


def combine(mu, a, ufc):
    return np.asarray(mu, dtype=float) + float(a) * np.asarray(ufc, dtype=float)


class TwoComponentController:
    """Continuous-time law ``u = mu + a_tau * u_fc`` for use inside the simulator.

    ``mu`` is set from outside (zero-order hold of a predictive controller).
    ``reference(t)`` returns ``(y_ref, dy_ref)``. With ``safeguard=False`` the
    activation is forced to zero; funnel errors are still evaluated so that
    leaving the funnel is detected.
    """

    def __init__(self, m, sigma, reference, lam=0.75, tau=0.025, safeguard=True, full_gain=False):
        self.m = int(m)
        self.sigma = sigma
        self.reference = reference
        self.window = ActivationWindow(tau, lam)
        self.safeguard = safeguard
        self.full_gain = full_gain
        self.mu = np.zeros(self.m)
        self.max_activation = 0.0
        self.diagnostics = {}

    def set_mu(self, mu):
        self.mu = np.asarray(mu, dtype=float).reshape(self.m)

    def reset_activation_log(self):
        self.max_activation = 0.0

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        y, dy = x[: self.m], x[self.m:]
        y_ref, dy_ref = self.reference(t)
        err = error_vars(t, y, dy, y_ref, dy_ref, self.sigma)
        n2 = float(np.linalg.norm(err.e2))
        if self.safeguard:
            try:
                ufc = u_fc(err.e2)
            except FunnelViolationError as exc:
                raise FunnelViolationError("e2", exc.norm, t) from None
            a = 1.0 if self.full_gain else activation(self.window, t, n2)
        else:
            ufc = u_fc(err.e2) if n2 < 1.0 - SINGULARITY_MARGIN else np.full(self.m, np.nan)
            a = 0.0
        u = self.mu + a * ufc if a > 0 else self.mu.copy()
        self.max_activation = max(self.max_activation, a)
        self.diagnostics = {
            "mu": float(self.mu[0]) if self.m == 1 else float(np.linalg.norm(self.mu)),
            "u_fc": float(ufc[0]) if self.m == 1 else float(np.linalg.norm(ufc)),
            "a_tau": a,
            "u": float(u[0]) if self.m == 1 else float(np.linalg.norm(u)),
            "e1_norm": float(np.linalg.norm(err.e1)),
            "e2_norm": n2,
            "sigma": float(self.sigma(t)),
        }
        return u
