"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes (config 2, data 3, numeric 4).
"""


class DlabError(Exception):
    exit_code = 1


class ConfigError(DlabError, ValueError):
    exit_code = 2


class ContractError(DlabError, ValueError):
    """A caller violated an operation's precondition."""

    exit_code = 2


class DimensionError(ContractError):
    pass


class InputError(DlabError, ValueError):
    exit_code = 3


class DataError(DlabError, ValueError):
    exit_code = 3


class NumericError(DlabError, ArithmeticError):
    exit_code = 4
