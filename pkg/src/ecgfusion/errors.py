"""Exception hierarchy shared across the pipeline.

Each family maps to one CLI exit code so shell callers can branch on the
kind of failure without parsing messages.
"""


class EcgFusionError(Exception):
    """Base class; `code` is a stable machine-readable identifier."""

    exit_code = 1

    def __init__(self, message: str, code: str = "error"):
        super().__init__(message)
        self.code = code


class ConfigError(EcgFusionError):
    """Invalid or inconsistent run configuration."""

    exit_code = 2

    def __init__(self, message: str, code: str = "config"):
        super().__init__(message, code)


class DataError(EcgFusionError):
    """Unreadable, malformed, or contract-violating input data."""

    exit_code = 3

    def __init__(self, message: str, code: str = "data"):
        super().__init__(message, code)


class NumericError(EcgFusionError):
    """Non-finite state, divergence, or numeric contract violations."""

    exit_code = 4

    def __init__(self, message: str, code: str = "numeric"):
        super().__init__(message, code)


class LeakageError(EcgFusionError):
    """Fatal protocol violation: evaluation data touched a fit operation."""

    exit_code = 5

    def __init__(self, message: str, code: str = "leakage"):
        super().__init__(message, code)
