"""Exception hierarchy shared across the package.

The CLI maps ConfigError and UsageError to exit code 2 (bad invocation)
and every other TreeplanError to exit code 1 (runtime failure).
"""


class TreeplanError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(TreeplanError):
    """Invalid or inconsistent configuration value."""


class UsageError(TreeplanError):
    """An operation was invoked in a way its contract forbids."""


class ShapeError(TreeplanError):
    """Tensor shape or dtype mismatch."""


class MaskError(TreeplanError):
    """Structurally invalid attention mask (e.g. a fully masked row)."""


class StructureError(TreeplanError):
    """Search tree structure violated an operation's precondition."""


class CapacityError(TreeplanError):
    """A resource limit (tree node capacity) was exceeded."""


class TrainError(TreeplanError):
    """Training failure, e.g. non-finite gradients."""


class BenchEquivalenceError(TreeplanError):
    """Paired benchmark configs produced different tree statistics."""

    def __init__(self, message, dump=""):
        super().__init__(message)
        self.dump = dump
