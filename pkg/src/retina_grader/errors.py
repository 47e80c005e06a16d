"""Exception hierarchy shared by every module.

Each class carries the process exit code the CLI maps it to.
"""


class RetinaGraderError(Exception):
    exit_code = 3


class UsageError(RetinaGraderError, ValueError):
    """Bad arguments, bad configuration, or an API called out of order."""

    exit_code = 1


class ConfigError(UsageError):
    pass


class ShapeError(RetinaGraderError, ValueError):
    exit_code = 3


class DataError(RetinaGraderError):
    exit_code = 2


class ParseError(DataError, ValueError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)


class LabelError(DataError, ValueError):
    pass


class StratificationError(DataError):
    pass


class IntegrityError(DataError):
    pass


class NumericError(RetinaGraderError, ArithmeticError):
    exit_code = 3
