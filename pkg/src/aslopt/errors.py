"""Exception hierarchy for the aslopt package."""


class AslError(Exception):
    """Base class for all aslopt errors."""


class InvalidInputError(AslError, ValueError):
    """Malformed numeric input (non-finite entries, bad shapes, negative durations)."""


class ControllabilityError(AslError):
    """The plant fails the single-input controllability rank condition."""


class InconsistentActiveSetError(AslError):
    """A set of active constraints admits no common state.

    ``pair`` names an offending pair of constraint indices when one exists,
    otherwise the single index whose addition broke solvability.
    """

    def __init__(self, message, pair=None):
        super().__init__(message)
        self.pair = pair


class InvalidJunctionError(AslError):
    """Two adjacent arcs cannot legally be connected."""


class InfeasibleTrajectoryError(AslError):
    """A trajectory violates a constraint; carries the time and constraint index."""

    def __init__(self, message, time=None, constraint=None):
        super().__init__(message)
        self.time = time
        self.constraint = constraint


class StaleTrajectoryError(AslError):
    """Equality rows do not hold on the trajectory they were built from."""


class InvalidScheduleError(AslError, ValueError):
    """Keypoint times are not strictly increasing."""


class DegenerateProblemError(AslError):
    """An empty equality system was handed to the rank test."""


class ProjectionFailureError(AslError):
    """Newton restoration did not converge inside its trust region."""


class RestructureError(AslError):
    """Arc deletion produced a sequence that cannot form a valid switching law."""


class AslParseError(AslError, ValueError):
    """Malformed switching-law text; ``position`` is the offending token index."""

    def __init__(self, message, position=None):
        super().__init__(message)
        self.position = position


class WrongRegimeError(AslError):
    """An operation restricted to unconstrained problems saw finite state bounds."""


class DomainError(AslError, ValueError):
    """Scalar argument outside the operation's domain."""


class ChatteringTermination(AslError):
    """The junction-time recursion has no admissible continuation.

    Not a failure: it is the signal that a chattering structure cannot be
    extended from the given window.
    """

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
