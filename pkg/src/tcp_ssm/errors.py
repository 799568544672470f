"""Exception hierarchy for the TCP-SSM operator.

Every error carries the CLI exit code it maps to, so the command-line driver
can translate failures without string matching:

- 2: input errors (files, shapes, configuration)
- 3: numeric errors (non-finite values, root finding, pole evaluation)
- 4: stability violations
- 5: verification failures
"""

from __future__ import annotations

from collections.abc import Sequence


class TcpError(Exception):
    """Base class for all operator errors."""

    exit_code: int = 2


# Input errors


class ShapeMismatch(TcpError, ValueError):
    """Raised when array shapes disagree with the operator configuration."""


class ConfigError(TcpError, ValueError):
    """Raised for invalid hyperparameters or parameter files."""


class IndexOutOfRange(TcpError, IndexError):
    """Raised when a group or layer index is outside its valid range."""


class EmptyFactorList(TcpError, ValueError):
    """Raised when a polynomial product is requested over no factors."""


class IoFailure(TcpError, OSError):
    """Raised when a tensor or report file cannot be written."""


class TensorFormatError(TcpError, ValueError):
    """Base class for malformed .tcpt files."""


class BadMagic(TensorFormatError):
    """Raised when a file does not start with the TCPT magic bytes."""


class TruncatedPayload(TensorFormatError):
    """Raised when a file holds fewer bytes than its header promises."""


class DtypeUnsupported(TensorFormatError):
    """Raised for dtypes other than float32/float64."""


# Numeric errors


class NumericError(TcpError, ArithmeticError):
    exit_code = 3


class NonFiniteDetected(NumericError):
    """Raised when the recurrence produces NaN/Inf.

    Attributes:
        token_index: Original (pre-route) index of the first offending token
    """

    def __init__(self, token_index: int, route_id: str | None = None):
        self.token_index = token_index
        self.route_id = route_id
        where = f" on route {route_id!r}" if route_id else ""
        super().__init__(f"Non-finite output at token {token_index}{where}")


class RootFindingDiverged(NumericError):
    """Raised when neither root finder meets the residual tolerance."""


class NonFiniteGradient(NumericError):
    def __init__(self, parameter: str):
        self.parameter = parameter
        super().__init__(f"Non-finite gradient for parameter {parameter!r}")


class PoleEvaluation(NumericError):
    """Raised when a transfer function is evaluated on one of its poles."""

    def __init__(self, z: complex):
        self.z = z
        super().__init__(f"Transfer function evaluated at a pole: z={z}")


# Stability and verification


class InstabilityError(TcpError):
    exit_code = 4


class VerificationFailed(TcpError):
    exit_code = 5

    def __init__(self, failed: Sequence[str]):
        self.failed = list(failed)
        super().__init__("Verification failed: " + ", ".join(self.failed))


class MismatchBeyondTolerance(TcpError):
    exit_code = 5

    def __init__(self, what: str, max_error: float, tolerance: float):
        self.what = what
        self.max_error = max_error
        self.tolerance = tolerance
        super().__init__(
            f"{what}: max error {max_error:.3e} exceeds tolerance {tolerance:.1e}"
        )
