"""Exception types raised by the engine."""


class EdgeOPCError(Exception):
    """Base class for all engine errors."""


class GeometryError(EdgeOPCError):
    """Invalid or unusable layout geometry."""


class ConfigError(EdgeOPCError):
    """Inconsistent configuration or mismatched inputs."""


class ContractError(EdgeOPCError):
    """A function was called with inputs that break its stated contract."""


class DivergenceError(EdgeOPCError):
    """The optimizer produced a non-finite loss.

    The partial iteration log is attached as ``log``.
    """

    def __init__(self, message, log=None):
        super().__init__(message)
        self.log = log or []
