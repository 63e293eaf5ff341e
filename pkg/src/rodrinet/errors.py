"""Exception types shared across the library.

The CLI maps these onto process exit codes: validation and format problems
exit 2, numerical failures exit 3.
"""


class RodriNetError(Exception):
    """Base class for all library errors."""


class InvalidAxis(RodriNetError):
    """Rotation axis is not unit length."""


class InvalidQuaternion(RodriNetError):
    """Quaternion is not unit length."""


class InvalidParameter(RodriNetError):
    """Scalar argument outside its documented range."""


class InvalidTopology(RodriNetError):
    """Robot description does not form a rooted tree."""


class SchemaError(RodriNetError):
    """Robot description or config document violates its schema."""


class ShapeError(RodriNetError):
    """Operands have incompatible shapes; message carries both shapes."""


class InvalidLoss(RodriNetError):
    """backward() called on a non-scalar node."""


class InvalidShape(RodriNetError):
    """Kernel or tensor constructed with an unsupported shape."""


class ConfigError(RodriNetError):
    """Inconsistent network or training configuration."""


class IKDidNotConverge(RodriNetError):
    """Inverse kinematics hit the iteration cap; carries the residual."""

    def __init__(self, residual, iterations):
        super().__init__(
            f"IK did not converge: residual {residual:.3e} after {iterations} iterations"
        )
        self.residual = residual
        self.iterations = iterations


class RejectionBudgetExceeded(RodriNetError):
    """Trajectory generator rejected too many consecutive samples."""


class FormatError(RodriNetError):
    """Container file is malformed; carries the byte offset of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class DivergedError(RodriNetError):
    """Training loss became non-finite; carries the step number."""

    def __init__(self, step):
        super().__init__(f"training diverged: non-finite loss at step {step}")
        self.step = step
