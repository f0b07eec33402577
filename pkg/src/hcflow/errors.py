"""Exception hierarchy shared by every hcflow module."""


class HCFlowError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(HCFlowError, ValueError):
    """A tensor does not have the shape an operation requires.

    Args:
        op: Name of the operation that rejected the input.
        dim: Name of the offending dimension (``"channels"``, ``"height"``, ...).
        expected: What the operation wanted.
        got: What it received.
    """

    def __init__(self, op: str, dim: str, expected, got):
        self.op = op
        self.dim = dim
        self.expected = expected
        self.got = got
        super().__init__(f"{op}: bad {dim}: expected {expected}, got {got}")


class SingularMatrixError(HCFlowError, ValueError):
    def __init__(self, op: str, det_abs: float):
        self.det_abs = det_abs
        super().__init__(f"{op}: matrix is singular (|det| = {det_abs:.3e})")


class NonFiniteError(HCFlowError, FloatingPointError):
    """NaN or Inf appeared in a tensor, loss or gradient."""


class ConfigError(HCFlowError, ValueError):
    pass


class CheckpointError(HCFlowError, ValueError):
    pass


class TrainingDiverged(HCFlowError, RuntimeError):
    """Loss became non-finite; the last good checkpoint is kept on disk."""

    def __init__(self, step: int, last_good: str | None):
        self.step = step
        self.last_good = last_good
        super().__init__(
            f"non-finite loss at step {step}; last good checkpoint: {last_good}"
        )
