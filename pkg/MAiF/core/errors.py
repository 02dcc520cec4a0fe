"""Exception hierarchy shared by every MAiF module."""


class MAiFError(Exception):
    """Base class for all toolkit errors."""


class ContractViolation(MAiFError, ValueError):
    """An operation was called with arguments outside its contract."""


class GenerationFailure(MAiFError):
    """Map or spawn generation gave up after its bounded retries."""


class InvalidGoal(MAiFError, ValueError):
    """A goal cell is an obstacle or lies off the map."""


class PlannerTimeout(MAiFError, TimeoutError):
    """A planner exceeded its time limit."""

    def __init__(self, planner: str, limit: float):
        super().__init__(f"{planner} exceeded the {limit:.1f}s time limit")
        self.planner = planner
        self.limit = limit


class Infeasible(MAiFError):
    """No conflict-free plan exists for the instance."""


class PlanValidationError(MAiFError):
    """A plan violates the simulator's movement or conflict rules."""


class DegenerateRange(MAiFError, ValueError):
    """The formation-loss range is empty, so no finite weight exists."""


class DivergenceError(MAiFError, ArithmeticError):
    """Training produced a non-finite loss."""


class ConfigError(MAiFError, ValueError):
    """A configuration file or flag is malformed."""
