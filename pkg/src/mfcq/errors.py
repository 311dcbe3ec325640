"""Exception hierarchy shared by the solver, simulators and CLI."""


class MFCError(Exception):
    """Base class for every error raised by :mod:`mfcq`."""


class ModelConfigError(MFCError, ValueError):
    """Malformed model document: missing key, bad shape, non-finite entry."""


class ConditionHError(MFCError, ValueError):
    """The structural sign conditions on the LQ data do not hold."""

    def __init__(self, report):
        self.report = report
        super().__init__(f"condition (H) violated: {', '.join(report.violations)}")


class TimeRangeError(MFCError, ValueError):
    pass


class SingularityError(MFCError, ArithmeticError):
    """A U or V block is (numerically) singular."""

    def __init__(self, block: str, t: float, eigenvalues):
        self.block = block
        self.t = t
        self.eigenvalues = eigenvalues
        super().__init__(f"{block} block singular at t={t:.6g}; eigenvalues={list(eigenvalues)}")


class DivergenceError(MFCError, ArithmeticError):
    """Non-finite values appeared while integrating or simulating."""

    def __init__(self, message: str, *, t=None, step=None):
        self.t = t
        self.step = step
        super().__init__(message)


class DefinitenessError(MFCError, ArithmeticError):
    """A covariance that must be positive (semi)definite is not."""


class DegenerateMapError(MFCError, ArithmeticError):
    """Every cell of a Gibbs exponent underflowed."""


class InvariantViolation(MFCError, AssertionError):
    """A property that holds by theory failed numerically; signals a bug."""


class StudyInconclusive(MFCError):
    """A Monte Carlo study could not resolve the quantity it measures."""
