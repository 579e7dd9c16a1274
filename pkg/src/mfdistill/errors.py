"""Exception hierarchy shared across the package."""


class MfDistillError(Exception):
    pass


class ShapeError(MfDistillError, ValueError):
    pass


class ContractError(MfDistillError, ValueError):
    pass


class ConfigError(MfDistillError, ValueError):
    pass


class NumericError(MfDistillError, ArithmeticError):
    pass


class OracleCapError(ContractError):
    """Full relation-map oracle asked to build a map above its row cap."""


class DivergenceError(NumericError):
    """Training produced a non-finite value; carries the step and loss terms."""

    def __init__(self, message, step=None, term=None, breakdown=None):
        super().__init__(message)
        self.step = step
        self.term = term
        self.breakdown = dict(breakdown or {})


class StageError(MfDistillError):
    """An experiment stage failed; ``stage`` names it and outputs so far are kept."""

    def __init__(self, message, stage):
        super().__init__(message)
        self.stage = stage
