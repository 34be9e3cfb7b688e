"""Exception types shared across the package."""


class RightsizeError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(RightsizeError):
    """Shapes of demand, cost grid, offsets, or schedules do not agree."""


class InfeasibleError(RightsizeError):
    """A schedule or instance cannot satisfy its constraints."""


class CostDomainError(RightsizeError):
    """A workload was evaluated outside a cost function's finite domain."""


class ConvergenceError(RightsizeError):
    """A solver exhausted its iteration budget without certifying a solution."""


class DataError(RightsizeError):
    """A trace file is malformed or inconsistent."""


class InvariantViolation(RightsizeError):
    """A runtime invariant backed by the theory failed on concrete data."""
