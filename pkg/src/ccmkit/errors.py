"""Exception types shared across the package."""


class InputError(ValueError):
    """Rejected input: bad dimensions, unknown names, violated preconditions."""


class NoCrossingError(ValueError):
    """A bisection predicate takes the same value at both ends of the bracket."""


class SynthesisFailed(RuntimeError):
    """Certificate synthesis did not produce a verified certificate.

    The solver report (and verification report, when one was run) ride along
    so callers can inspect how close the search came.
    """

    def __init__(self, message, solve_report=None, verification=None):
        super().__init__(message)
        self.solve_report = solve_report
        self.verification = verification


class ControllerError(RuntimeError):
    """A feedback law could not be evaluated at the requested state."""


class ControllabilityError(ControllerError):
    """The control direction is orthogonal to the descent direction of the energy."""
