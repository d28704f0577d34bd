"""
Domain exceptions

Every error raised by the services derives from ARWKVError and from the
builtin exception a caller would naturally catch.
"""

from typing import Iterable, Optional


class ARWKVError(Exception):
    """Base class for all A-RWKV errors"""


class DimensionError(ARWKVError, ValueError):
    """Tensor shapes do not agree"""


class ContractError(ARWKVError, ValueError):
    """A documented precondition of an operation was violated"""


class ConfigError(ARWKVError, ValueError):
    """Invalid model, recipe or task configuration"""

    def __init__(self, message: str, fields: Optional[Iterable[str]] = None):
        self.fields = list(fields or [])
        super().__init__(message)


class NumericError(ARWKVError, ArithmeticError):
    """NaN or Inf produced by an operation"""

    def __init__(self, message: str, op: Optional[str] = None, step: Optional[int] = None):
        self.op = op
        self.step = step
        super().__init__(message)


class FormatError(ARWKVError, ValueError):
    """Malformed MELF, checkpoint or manifest content"""

    def __init__(self, message: str, offset: Optional[int] = None, line: Optional[int] = None):
        self.offset = offset
        self.line = line
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message)
