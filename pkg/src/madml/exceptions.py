"""Exception hierarchy; the CLI maps these to exit codes."""


class MadmlError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class DataError(MadmlError):
    """Input data failed parsing or validation."""

    exit_code = 3


class SchemaError(DataError):
    pass


class ParseError(DataError):
    pass


class ValidationError(DataError):
    pass


class ConfigError(MadmlError):
    """Bad configuration or usage."""

    exit_code = 2


class BasisError(MadmlError):
    pass


class OutOfSupportError(BasisError):
    pass


class SingularDesignError(BasisError):
    pass


class SolverError(MadmlError):
    pass


class DivergenceError(SolverError):
    """The penalised objective appears unbounded below for this penalty."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class DegenerateProblemError(SolverError):
    pass


class SelectionError(MadmlError):
    pass


class CalibrationError(MadmlError):
    pass


class InferenceError(MadmlError):
    pass
