"""Exception hierarchy.  ``exit_code`` is what the command-line driver returns."""


class FlowGuardError(Exception):
    exit_code = 2


class ConfigError(FlowGuardError, ValueError):
    exit_code = 1


class InvalidInputError(FlowGuardError, ValueError):
    pass


class InvalidShapeError(InvalidInputError):
    pass


class DomainError(FlowGuardError, ValueError):
    pass


class NoRootError(FlowGuardError, RuntimeError):
    pass


class InvalidModelError(FlowGuardError, ValueError):
    pass


class UnsupportedModelError(FlowGuardError, ValueError):
    pass


class InsufficientDataError(FlowGuardError, ValueError):
    exit_code = 3


class NumericOverflowError(FlowGuardError, FloatingPointError):
    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class TrainingDivergedError(FlowGuardError, RuntimeError):
    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class ParseError(FlowGuardError, ValueError):
    exit_code = 3

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
