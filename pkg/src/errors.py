"""
Exception hierarchy for the connectome prediction system
Every error raised by the library derives from ConnectomePredictError
"""

from typing import Optional


class ConnectomePredictError(Exception):
    """Base class for all library errors"""


class ConfigError(ConnectomePredictError):
    """Invalid sampler, cross-validation or command-line parameters"""


class DataValidationError(ConnectomePredictError):
    """Input files or in-memory datasets that break a data invariant"""


class DomainError(DataValidationError):
    """A value outside the domain of a transformation (e.g. |r| >= 1 for Fisher z)"""


class SamplerError(ConnectomePredictError):
    """Non-finite or otherwise invalid value produced during sampling"""

    def __init__(self, message: str, iteration: Optional[int] = None, parameter: Optional[str] = None):
        self.iteration = iteration
        self.parameter = parameter
        context = []
        if iteration is not None:
            context.append(f"iteration {iteration}")
        if parameter is not None:
            context.append(f"parameter {parameter}")
        if context:
            message = f"{message} ({', '.join(context)})"
        super().__init__(message)


class AnalysisError(ConnectomePredictError):
    """Statistical analysis that cannot be carried out on the given input"""


class ReportError(ConnectomePredictError):
    """Run directory I/O failure or manifest verification failure"""
