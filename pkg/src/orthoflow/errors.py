"""Exception hierarchy shared across the package."""


class OrthoflowError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(OrthoflowError, ValueError):
    """Operands of a primitive do not conform."""

    def __init__(self, op, *shapes, detail=""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes {', '.join(str(s) for s in self.shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class SingularMatrixError(OrthoflowError, ArithmeticError):
    """A small dense system could not be solved reliably."""

    def __init__(self, message, condition=float("inf")):
        self.condition = condition
        super().__init__(f"{message} (condition estimate {condition:.3e})")


class IntegrationError(OrthoflowError, ArithmeticError):
    """A Cayley or Euler step hit a singular system."""

    def __init__(self, step, condition):
        self.step = step
        self.condition = condition
        super().__init__(
            f"integration step {step}: singular Woodbury system "
            f"(condition estimate {condition:.3e})"
        )


class ConfigError(OrthoflowError, ValueError):
    """Invalid or inconsistent configuration."""


class CheckpointError(OrthoflowError, IOError):
    """Checkpoint file is corrupt or has the wrong version."""


class NonFiniteGradientError(OrthoflowError, FloatingPointError):
    """An optimizer received NaN or Inf gradients."""

    def __init__(self, name):
        self.name = name
        super().__init__(f"non-finite gradient in parameter {name!r}")
