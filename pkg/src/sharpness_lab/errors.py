"""Exception hierarchy shared across the package."""


class LabError(Exception):
    """Base class for all errors raised by sharpness_lab."""


class ShapeError(LabError, ValueError):
    """Operand shapes do not conform for a primitive."""

    def __init__(self, op, *shapes, detail=""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes {', '.join(str(s) for s in self.shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NumericError(LabError, ArithmeticError):
    """A computation produced NaN or Inf."""


class DivergenceError(NumericError):
    """Training produced a non-finite loss."""

    def __init__(self, message, step=None, epoch=None):
        self.step = step
        self.epoch = epoch
        where = []
        if epoch is not None:
            where.append(f"epoch {epoch}")
        if step is not None:
            where.append(f"step {step}")
        if where:
            message = f"{message} at {', '.join(where)}"
        super().__init__(message)


class ConfigError(LabError, ValueError):
    """Invalid configuration value or file."""


class FormatError(LabError, ValueError):
    """Malformed binary or text input (IDX, checkpoint, CSV)."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
