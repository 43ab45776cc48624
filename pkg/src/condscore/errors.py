"""Exception types raised across the package."""


class CondScoreError(Exception):
    """Base class for all package errors."""


class DomainError(CondScoreError, ValueError):
    """An argument lies outside the operation's domain (e.g. t outside [0, T])."""


class SingularKernelError(DomainError):
    """The transition kernel has zero variance, so its score is undefined."""


class ShapeError(CondScoreError, ValueError):
    pass


class ConfigError(CondScoreError, ValueError):
    pass


class ContractError(CondScoreError, ValueError):
    """Inputs violate an estimator's structural contract."""


class NumericError(CondScoreError, ArithmeticError):
    """Non-finite values or a singular linear system."""


class RankError(NumericError):
    pass
