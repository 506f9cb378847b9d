"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: ``ConfigError`` -> 2, ``DataError`` -> 3,
``NumericError`` -> 4.
"""


class TFTError(Exception):
    """Base class for all package errors."""


class ConfigError(TFTError, ValueError):
    pass


class DataError(TFTError, ValueError):
    pass


class DimensionError(TFTError, ValueError):
    pass


class ContractError(TFTError, RuntimeError):
    """A caller broke an operation's precondition."""


class GraphError(ContractError):
    pass


class NumericError(TFTError, ArithmeticError):
    def __init__(self, stage: str, detail: str = "non-finite values"):
        self.stage = stage
        super().__init__(f"{detail} at stage '{stage}'")
