"""Exception types raised across the package."""


class SmolMambaError(Exception):
    """Base class; ``kind`` is the machine-readable name used by the CLI."""

    @property
    def kind(self) -> str:
        return type(self).__name__


class ShapeMismatch(SmolMambaError, ValueError):
    pass


class DivisionByZero(SmolMambaError, ZeroDivisionError):
    pass


class AxisOutOfRange(SmolMambaError, IndexError):
    pass


class NonFiniteLoss(SmolMambaError, FloatingPointError):
    def __init__(self, message: str, epoch: int | None = None, batch: int | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class NonFiniteLogits(SmolMambaError, FloatingPointError):
    pass


class NonPositiveDelta(SmolMambaError, ValueError):
    pass


class LambdaTooCloseToZero(SmolMambaError, ValueError):
    pass


class PhiOutOfRange(SmolMambaError, ValueError):
    pass


class EmptySampleMask(SmolMambaError, ValueError):
    pass


class EmptyMask(SmolMambaError, ValueError):
    pass


class ResolutionMismatch(SmolMambaError, ValueError):
    pass


class MissingLayerCount(SmolMambaError, KeyError):
    pass


class UnknownKey(SmolMambaError, KeyError):
    def __init__(self, key: str, message: str | None = None):
        super().__init__(message or f"unknown config key: {key!r}")
        self.key = key

    def __str__(self) -> str:
        return self.args[0]


class TypeMismatch(SmolMambaError, TypeError):
    pass


class MissingFile(SmolMambaError, FileNotFoundError):
    pass


class CorruptRecord(SmolMambaError, ValueError):
    pass


class LabelOutOfRange(SmolMambaError, ValueError):
    pass


class CheckpointFormatError(SmolMambaError, ValueError):
    pass
