"""Exception types shared across the package."""


class MetaDeformError(Exception):
    """Base class for all errors raised by metadeform."""


class ShapeError(MetaDeformError, ValueError):
    """Operand dimensions do not agree."""


class EmptyCloudError(MetaDeformError, ValueError):
    """A point cloud (or feature matrix) with zero rows was given."""


class FormatError(MetaDeformError, ValueError):
    """A file could not be parsed.

    ``line`` and ``offset`` locate the failure when known.
    """

    def __init__(self, message, line=None, offset=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"byte offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.line = line
        self.offset = offset


class ContractError(MetaDeformError, ValueError):
    """A documented precondition was violated."""


class NumericError(MetaDeformError, ArithmeticError):
    """Non-finite values where finite ones are required."""
