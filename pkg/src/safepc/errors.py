"""Exception hierarchy shared by all modules."""


class SafePCError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(SafePCError, ValueError):
    pass


class IntegrationBlowupError(SafePCError, ArithmeticError):
    def __init__(self, t, message=None):
        self.t = float(t)
        super().__init__(message or f"non-finite vector field evaluation at t={self.t:.6g}")


class DegenerateConstraintsError(SafePCError, ArithmeticError):
    pass


class DivergedError(SafePCError, ArithmeticError):
    pass


class InsufficientDataError(SafePCError, ValueError):
    pass


class PreconditionError(SafePCError, ValueError):
    pass


class InconsistentHistoryError(SafePCError, ValueError):
    pass


class FunnelViolationError(SafePCError):
    """An auxiliary error variable reached the funnel boundary."""

    def __init__(self, which, norm, t=None):
        self.which = which
        self.norm = float(norm)
        self.t = None if t is None else float(t)
        where = "" if t is None else f" at t={self.t:.6g}"
        super().__init__(f"|{which}| = {self.norm:.12g} reached the funnel boundary{where}")


class SafeguardViolationError(SafePCError):
    """Closed-loop simulation left the funnel; carries the diagnostic state."""

    def __init__(self, t, e1_norm, e2_norm, trajectory=None):
        self.t = float(t)
        self.e1_norm = float(e1_norm)
        self.e2_norm = float(e2_norm)
        self.trajectory = trajectory
        super().__init__(
            f"safeguard violated at t={self.t:.6g}: |e1|={self.e1_norm:.6g}, |e2|={self.e2_norm:.6g}"
        )


class SurrogateBlowupError(SafePCError, ArithmeticError):
    def __init__(self, step):
        self.step = int(step)
        super().__init__(f"surrogate prediction became non-finite at step {self.step}")


class UnsupportedKernelError(SafePCError, ValueError):
    pass


class RankDeficientInputsError(SafePCError, ValueError):
    def __init__(self, cluster, rank, required):
        self.cluster = cluster
        super().__init__(
            f"cluster {cluster}: input matrix has rank {rank}, need {required}"
        )


class ConditioningError(SafePCError, ArithmeticError):
    pass


class InfeasibleSplineError(SafePCError, ValueError):
    pass
