"""Exception hierarchy shared by every module.

The CLI maps these onto process exit codes, so each class carries the code it
should surface as.
"""


class DWShareError(Exception):
    exit_code = 1


class ShapeError(DWShareError, ValueError):
    exit_code = 2


class InvalidArgumentError(DWShareError, ValueError):
    exit_code = 2


class ConfigError(DWShareError, ValueError):
    exit_code = 2


class RegistryError(DWShareError, KeyError):
    exit_code = 2

    def __str__(self):
        # KeyError repr-quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class StateError(DWShareError, RuntimeError):
    exit_code = 2


class DataError(DWShareError, ValueError):
    exit_code = 3


class FormatError(DataError):
    exit_code = 3


class NumericalError(DWShareError, ArithmeticError):
    exit_code = 4


class NotApplicableError(DWShareError):
    exit_code = 2
