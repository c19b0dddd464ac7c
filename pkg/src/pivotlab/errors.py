"""Exception types raised across the package."""


class PivotLabError(Exception):
    pass


class DomainError(PivotLabError, ValueError):
    """An argument lies outside the operation's domain."""


class SizeError(PivotLabError):
    """A tree is too large to enumerate."""


class TerminalError(PivotLabError):
    """An action was requested at a leaf."""


class FixtureNotFound(PivotLabError, KeyError):
    pass


class ConfigError(PivotLabError):
    pass


class NumericError(PivotLabError, ArithmeticError):
    pass


class ContractError(PivotLabError):
    """Caller broke an on-policy or shape contract."""
