"""Exception hierarchy shared across the package.

Each exception carries the CLI exit code it maps to so the dispatcher does
not need a lookup table.
"""


class QSLError(Exception):
    exit_code = 2


# quant-core
class GranularityMismatch(QSLError):
    pass


class InvalidValue(QSLError):
    pass


class ConfigError(QSLError):
    pass


# stats / laws / fitting
class DegenerateSample(QSLError):
    pass


class DomainError(QSLError):
    pass


class DegenerateInput(QSLError):
    pass


class InsufficientData(QSLError):
    pass


class NonPositiveDelta(QSLError):
    pass


class SingularDesign(QSLError):
    pass


class NonFiniteObjective(QSLError):
    exit_code = 4


# toy training
class NonFiniteLoss(QSLError):
    exit_code = 4

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class NonFiniteGradient(QSLError):
    exit_code = 4


# io
class SchemaError(QSLError):
    exit_code = 3

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ValidationError(QSLError):
    def __init__(self, message, fields=()):
        super().__init__(message)
        self.fields = tuple(fields)
