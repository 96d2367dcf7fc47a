"""Exception hierarchy shared by every module."""

from __future__ import annotations


class EditError(Exception):
    """Base class. ``step``/``layer``/``frame`` are filled in by the pipeline when known."""

    def __init__(self, message: str, *, step=None, layer=None, frame=None):
        super().__init__(message)
        self.step = step
        self.layer = layer
        self.frame = frame

    def __str__(self) -> str:
        msg = super().__str__()
        where = [f"{k}={v}" for k, v in (("step", self.step), ("layer", self.layer), ("frame", self.frame)) if v is not None]
        return f"{msg} [{', '.join(where)}]" if where else msg


class ConfigurationError(EditError, ValueError):
    pass


class ContractViolation(EditError, ValueError):
    pass


class DegenerateInputError(EditError, ValueError):
    pass


class UndefinedMetricError(EditError, ValueError):
    pass


class AlignmentError(EditError, ValueError):
    pass


class NumericError(EditError, FloatingPointError):
    pass


class SingularityError(NumericError, ZeroDivisionError):
    pass


class EmbeddingError(EditError, RuntimeError):
    pass
