"""Reference signals for the closed-loop scenarios."""
import math

import numpy as np

from ..errors import InvalidInputError

# The integral settles at 1 + 2/sqrt(pi) (about 2.128), not exactly at 2.
SETPOINT_LIMIT = 1.0 + 2.0 / math.sqrt(math.pi)


def setpoint_reference(t_shift: float, t: float):
    """``y_ref = 1 + (2/pi) int_0^t exp(-(s - t_shift)^2) ds`` and its derivative."""
    if t < 0:
        raise InvalidInputError("reference is defined for t >= 0")
    y = 1.0 + (math.erf(t - t_shift) + math.erf(t_shift)) / math.sqrt(math.pi)
    dy = 2.0 / math.pi * math.exp(-(t - t_shift) ** 2)
    return np.array([y]), np.array([dy])


def zero_reference(t: float):
    return np.zeros(1), np.zeros(1)
