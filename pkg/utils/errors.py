# ---------------------------------------
# Exception hierarchy
# ---------------------------------------
# Every failure raised by the library derives from SprigError so the
# CLI can map families of errors to exit codes in one place.


class SprigError(Exception):
    """Base class for all library errors."""


class InvalidValueError(SprigError, ValueError):
    """A numeric table holds NaN or Inf entries."""


class ConfigError(SprigError, ValueError):
    """
    A configuration value is missing, unknown or out of range.

    The offending key and the violated constraint are kept
    so the CLI can print them verbatim.
    """

    def __init__(self, key, constraint):
        self.key = key
        self.constraint = constraint
        super().__init__(f"{key}: {constraint}")


class NonConvergenceError(SprigError, RuntimeError):
    """Value iteration ran out of iterations."""

    def __init__(self, iterations, last_residual):
        self.iterations = iterations
        self.last_residual = last_residual
        super().__init__(
            f"no convergence after {iterations} iterations "
            f"(last residual {last_residual:.3e})"
        )


class UndefinedRatioError(SprigError, ZeroDivisionError):
    """Contraction ratio requested for two identical value tables."""


class StaleInputError(SprigError, ValueError):
    """A value table passed as a fixed point is not one."""


class ShapeError(SprigError, ValueError):
    """Array rank, shape or length does not match what the operation needs."""


class NumericError(SprigError, FloatingPointError):
    """A computation produced NaN or Inf. The node that did it is named."""

    def __init__(self, node, detail="non-finite value"):
        self.node = node
        super().__init__(f"{detail} in node '{node}'")


class UsageError(SprigError, RuntimeError):
    """An object was used out of order (missing grad, step after terminal, ...)."""


class ContractViolationError(SprigError, AssertionError):
    """A documented pre/post-condition between components was broken."""


class DegenerateBatchError(SprigError, ValueError):
    """Advantage normalization over fewer than two samples."""


class FormatError(SprigError, ValueError):
    """A file on disk has the wrong layout or format version."""


class SizeError(SprigError, ValueError):
    """Configuration too large for an exhaustive solver."""


class AlignmentError(SprigError, ValueError):
    """Metrics series from different seeds cannot be put on one step grid."""


class TrainingAbortedError(SprigError, RuntimeError):
    """Training stopped on a non-finite loss; iteration and stage are named."""

    def __init__(self, iteration, stage, detail):
        self.iteration = iteration
        self.stage = stage
        super().__init__(f"iteration {iteration}, {stage} stage: {detail}")
