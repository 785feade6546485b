"""Exception hierarchy shared across the pipeline.

The CLI maps each family onto a process exit code, so new errors should
subclass the closest family rather than ``EscimError`` directly.
"""


class EscimError(Exception):
    exit_code = 1


class ConfigError(EscimError):
    exit_code = 2


class ContractError(EscimError):
    """A caller violated a documented precondition."""

    exit_code = 3


class ShapeError(ContractError):
    pass


class ParseError(ContractError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DataIntegrityError(ContractError):
    pass


class UndefinedPopulationError(ContractError):
    """An expectation was requested over an empty sample space."""


class UndefinedMetricError(ContractError):
    pass


class NumericError(EscimError):
    exit_code = 4


class CalibrationError(NumericError):
    pass
