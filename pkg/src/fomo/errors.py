"""Exception hierarchy shared by the library and the CLI (which maps each to an exit code)."""


class FomoError(Exception):
    exit_code = 1


class ConfigError(FomoError, ValueError):
    exit_code = 2


class FormatError(FomoError, ValueError):
    exit_code = 3


class ContractError(FomoError, RuntimeError):
    exit_code = 4


class DimensionError(ContractError, ValueError):
    """Operand shapes do not conform."""


class RefusalError(ContractError):
    """Resume refused because the checkpoint was written under a different config."""
