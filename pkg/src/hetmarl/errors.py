"""Exception hierarchy shared across the package."""


class HetmarlError(Exception):
    pass


class DimensionError(HetmarlError, ValueError):
    pass


class ContractError(HetmarlError, ValueError):
    pass


class ConfigError(HetmarlError, ValueError):
    pass


class DivergenceError(HetmarlError, FloatingPointError):
    pass


class FormatError(HetmarlError, ValueError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
