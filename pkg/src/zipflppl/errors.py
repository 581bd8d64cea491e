"""Exception hierarchy shared by the library and the CLI."""


class ZipfLPPLError(Exception):
    """Base class for all package errors."""


class InputError(ZipfLPPLError, ValueError):
    """Malformed or invalid user input (files, windows, configs)."""


class PanelError(InputError):
    """Constituent panel failed to parse or validate.

    ``line`` is the 1-based CSV line number when the failure is tied to a row.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DomainError(ZipfLPPLError, ValueError):
    """Model evaluated outside its domain (t >= t_c, negative chi2 argument...)."""


class RankDeficiencyError(ZipfLPPLError, ArithmeticError):
    """The linear slaving system is singular or numerically rank deficient."""


class FitError(ZipfLPPLError, RuntimeError):
    """Calibration produced no usable fit."""
