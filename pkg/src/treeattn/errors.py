"""Exception hierarchy shared by every module.

The CLI maps each family onto an exit code, so new errors should subclass
one of the category bases rather than ``TreeAttnError`` directly.
"""


class TreeAttnError(Exception):
    exit_code = 1


class UsageError(TreeAttnError):
    exit_code = 1


class ConfigError(UsageError):
    pass


class DataError(TreeAttnError):
    exit_code = 2


class ParseError(DataError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class InvalidTreeError(DataError):
    pass


class VocabError(DataError):
    pass


class NumericError(TreeAttnError, ArithmeticError):
    exit_code = 3


class DimensionError(TreeAttnError, ValueError):
    exit_code = 3


class ContractError(TreeAttnError, RuntimeError):
    exit_code = 3


class AcceptanceFailure(TreeAttnError):
    exit_code = 4
