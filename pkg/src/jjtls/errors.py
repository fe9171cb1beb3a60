"""Exception hierarchy shared across the package.

Two broad families matter for the CLI exit codes: validation problems
(bad inputs, malformed files, out-of-range parameters) and numerical
failures (non-convergence, degenerate data, calibration breakdown).
"""


class JJTLSError(Exception):
    """Base class for all package errors."""


class ValidationError(JJTLSError, ValueError):
    """Input violates a documented precondition or schema."""


class InvalidParameterError(ValidationError):
    """A physical parameter set fails its validity checks."""


class SchemaError(ValidationError):
    """A configuration or data file does not match its documented schema."""


class NumericalError(JJTLSError, RuntimeError):
    """A numerical procedure failed (non-convergence, degeneracy, ...)."""


class NoResonanceError(NumericalError):
    """The background filter found no resonance feature in a trace."""


class ConvergenceError(NumericalError):
    """An iterative procedure did not converge within its budget."""


class CalibrationError(NumericalError):
    """Detector calibration could not separate noise from TLS residuals."""


class DegenerateDataError(NumericalError):
    """Data carry no usable variation for the requested operation."""
