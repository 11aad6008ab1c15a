"""ddpflow exceptions."""

from typing import Optional


class DdpfException(Exception):
    """Base exception for all ddpflow errors."""

    pass


class ValidationError(DdpfException):
    """Invalid input."""

    pass


class MalformedFieldError(ValidationError):
    """A case or dataset field can't be parsed."""

    pass


class DimensionMismatchError(ValidationError):
    """Vector or matrix sizes don't agree."""

    pass


class NegativeSquaredVoltageError(ValidationError):
    """Squared voltage below zero."""

    pass


class InconsistentAssignmentError(ValidationError):
    """Assignment doesn't match the measured set."""

    pass


class InvalidMergeError(ValidationError):
    """Merge would break the assignment invariants."""

    pass


class BudgetInfeasibleError(ValidationError):
    """Sensor budget can't be reached."""

    pass


class ConfigError(ValidationError):
    """Invalid pipeline configuration."""

    pass


class TopologyError(DdpfException):
    """Network topology is not a valid radial feeder."""

    pass


class MeshedTopologyError(TopologyError):
    """Cycle detected."""

    pass


class DisconnectedGraphError(TopologyError):
    """Not every bus is reachable from the slack."""

    pass


class NoSlackBusError(TopologyError):
    """No reference bus."""

    pass


class MultipleSlackBusesError(TopologyError):
    """More than one reference bus."""

    pass


class SingularInteriorError(TopologyError):
    """Eliminated block of the admittance matrix is singular."""

    pass


class MissingSlackAdjacencyError(TopologyError):
    """Reduced network has no edge into the slack."""

    pass


class ConvergenceError(DdpfException):
    """Power flow did not converge."""

    pass


class NoConvergenceError(ConvergenceError):
    """Iteration limit reached."""

    def __init__(
        self,
        message: str,
        iterations: int = 0,
        residual: float = float("nan"),
        step: Optional[int] = None,
    ):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual
        self.step = step


class VoltageCollapseError(ConvergenceError):
    """Squared voltage went non-positive."""

    pass


class EmptyDatasetError(DdpfException):
    """Dataset has no samples."""

    pass


class SolverError(DdpfException):
    """Conic solve failed."""

    pass


class NumericalBreakdownError(SolverError):
    """Solver hit a numerical breakdown."""

    def __init__(self, message: str, diagnostics: Optional[dict] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class SolverFailureError(SolverError):
    """Solver returned a non-optimal status."""

    pass


class InfeasibleOperatingPointError(SolverError):
    """No data-consistent point satisfies the requested injections."""

    pass
