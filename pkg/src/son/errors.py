"""Exception hierarchy shared by every module."""


class SonError(Exception):
    pass


class ConfigError(SonError, ValueError):
    """Bad configuration, unknown preset/experiment, or incompatible inputs."""


class DimensionError(SonError, ValueError):
    pass


class ContractError(SonError, ValueError):
    """A caller broke a precondition (mismatched cache, empty stack, ...)."""


class DomainError(SonError, ValueError):
    pass


class NumericError(SonError, ArithmeticError):
    def __init__(self, message, step=None, block=None):
        super().__init__(message)
        self.step = step
        self.block = block


class DivergenceError(NumericError):
    def __init__(self, message, epoch=None, step=None):
        super().__init__(message, step=step)
        self.epoch = epoch
