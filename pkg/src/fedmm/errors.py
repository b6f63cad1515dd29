"""Exception types shared across the package."""


class FedError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(FedError, ValueError):
    pass


class DegenerateInput(FedError, ValueError):
    pass


class InsufficientPopulation(FedError, ValueError):
    pass


class Infeasible(FedError, ValueError):
    pass


class NumericalError(FedError, ArithmeticError):
    pass


class UndefinedScore(FedError, ZeroDivisionError):
    pass


class ConfigError(FedError, ValueError):
    pass


class RoundError(FedError, RuntimeError):
    """Wraps any failure inside a federated round with its index."""

    def __init__(self, round_index, cause):
        super().__init__(f"round {round_index}: {type(cause).__name__}: {cause}")
        self.round_index = round_index
        self.cause = cause
