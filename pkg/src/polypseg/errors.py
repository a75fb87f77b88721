"""Exception types shared across the package.

The CLI maps these onto exit codes (usage 1, data 2, numeric 3), so new
failure modes should reuse one of the classes below rather than raising
bare ValueError.
"""


class PolypsegError(Exception):
    """Base class for all package errors."""


class ShapeError(PolypsegError, ValueError):
    """Array/tensor dimensions do not satisfy an operation's contract."""


class DataError(PolypsegError, ValueError):
    """Dataset, file, or configuration content is unusable."""


class CheckpointError(DataError):
    """Checkpoint bytes are malformed, truncated, or version-incompatible."""


class NumericError(PolypsegError, ArithmeticError):
    """A non-finite value appeared where the contract forbids it."""
