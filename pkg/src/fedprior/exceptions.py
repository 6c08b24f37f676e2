class FedPriorError(Exception):
    """Base class for all errors raised by fedprior."""


class ShapeError(FedPriorError, ValueError):
    pass


class ConfigError(FedPriorError, ValueError):
    pass


class FormatError(FedPriorError, ValueError):
    """Malformed serialized file. ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(FedPriorError, RuntimeError):
    """Non-finite loss or parameters encountered during optimization."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class ContractError(FedPriorError, RuntimeError):
    pass
