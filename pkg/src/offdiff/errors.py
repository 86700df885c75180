"""Exception types shared across the package.

Each class maps to a distinct CLI exit code (see cli.EXIT_CODES) so that
scripted callers can tell failure modes apart.
"""


class OffdiffError(Exception):
    """Base class for all package errors."""


class ShapeMismatchError(OffdiffError):
    """A solution/array does not have the expected length or shape."""


class InfeasibleSolutionError(OffdiffError):
    """A solution violates one of the constraints C1-C4.

    Carries the violation list produced by ``check_feasible``.
    """

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("infeasible solution: " + "; ".join(str(v) for v in self.violations))


class GenerationError(OffdiffError):
    """Instance generation could not satisfy its structural requirements."""


class BudgetExceededError(OffdiffError):
    """An enumeration would exceed the configured combination budget."""

    def __init__(self, combinations, budget):
        self.combinations = combinations
        self.budget = budget
        super().__init__(
            f"enumeration needs {combinations} combinations, budget is {budget}"
        )


class ScheduleError(OffdiffError):
    """A diffusion schedule fails the terminal-noise requirement or has bad params."""


class SchemaError(OffdiffError):
    """A dataset file does not match the expected schema version or layout."""


class CorruptRecordError(OffdiffError):
    """A dataset line failed to parse or validate; carries the line number."""

    def __init__(self, line_no, reason):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {reason}")


class MissingCheckpointError(OffdiffError):
    """A benchmark or sampler was pointed at a checkpoint that does not exist."""


class PreconditionError(OffdiffError):
    """A calculator was called with parameters outside its domain."""
