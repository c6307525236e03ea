"""Exception types shared across the package."""


class CohworkError(Exception):
    """Base class for all package errors."""


class ContractViolation(CohworkError, ValueError):
    """An operation was called outside its precondition."""


class WorkLockingError(ContractViolation):
    """A coherent state was handed to an incoherent-work formula."""


class ResourceLimitError(CohworkError, RuntimeError):
    """A requested dimension or subset search exceeds the configured cap."""


class TruncationError(CohworkError, RuntimeError):
    """Ladder support touches the edge of the simulated window."""


class DegenerateBranchError(CohworkError, ArithmeticError):
    """A Kraus branch has zero weight and cannot be normalized."""
