"""Exception hierarchy.

Every error carries a machine-readable ``category`` and the process exit code
the CLI maps it to.
"""


class LoralensError(Exception):
    category = "error"
    exit_code = 1


class ShapeError(LoralensError, ValueError):
    category = "shape"
    exit_code = 5


class ValidationError(LoralensError, ValueError):
    category = "validation"
    exit_code = 5


class ConvergenceError(LoralensError, RuntimeError):
    category = "convergence"
    exit_code = 5

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class EmptySpectrumError(LoralensError, ValueError):
    category = "empty_spectrum"
    exit_code = 5


class PairingError(LoralensError, ValueError):
    category = "pairing"
    exit_code = 5


class SampleSizeError(LoralensError, ValueError):
    category = "sample_size"
    exit_code = 5


class DegenerateKernelError(LoralensError, ValueError):
    category = "degenerate_kernel"
    exit_code = 5


class ConfigError(LoralensError, ValueError):
    category = "config"
    exit_code = 4


class DivergenceError(LoralensError, RuntimeError):
    category = "divergence"
    exit_code = 6

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class LltdError(LoralensError, ValueError):
    """Malformed LLTD container. ``code`` is one of ``LLTD_ERROR_CODES``."""

    category = "file"
    exit_code = 3

    def __init__(self, code, message):
        super().__init__(f"[{code}] {message}")
        self.code = code


LLTD_ERROR_CODES = {
    "bad_magic": 10,
    "bad_version": 11,
    "bad_dtype": 12,
    "truncated": 13,
    "shape_mismatch": 14,
    "non_finite": 15,
    "missing_entry": 16,
}
