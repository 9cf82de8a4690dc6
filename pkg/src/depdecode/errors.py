"""Error hierarchy shared by the library and the CLI.

Each class carries a machine-readable ``category`` and the process exit code
the CLI uses when the error escapes a subcommand.
"""


class DepDecodeError(Exception):
    category = "error"
    exit_code = 1


class ZeroProbabilityContext(DepDecodeError, ValueError):
    category = "zero-probability-context"
    exit_code = 10

    def __init__(self, message, trace=None):
        super().__init__(message)
        # Partial decode trace, set when raised from inside decode.
        self.trace = trace


class EnumerationCapExceeded(DepDecodeError, ValueError):
    category = "enumeration-cap-exceeded"
    exit_code = 11


class DimensionMismatch(DepDecodeError, ValueError):
    category = "dimension-mismatch"
    exit_code = 12


class InvalidDistribution(DepDecodeError, ValueError):
    category = "invalid-distribution"
    exit_code = 13


class EmptyMaskSet(DepDecodeError, ValueError):
    category = "empty-mask-set"
    exit_code = 14


class NoProgress(DepDecodeError, RuntimeError):
    category = "no-progress"
    exit_code = 15


class EmptyCache(DepDecodeError, ValueError):
    category = "empty-cache"
    exit_code = 16


class NonFiniteLoss(DepDecodeError, FloatingPointError):
    category = "non-finite-loss"
    exit_code = 17


class FormatVersionMismatch(DepDecodeError, ValueError):
    category = "format-version-mismatch"
    exit_code = 18


class ConfigError(DepDecodeError, ValueError):
    category = "config-error"
    exit_code = 19


class IOFailure(DepDecodeError, OSError):
    category = "io-error"
    exit_code = 20
