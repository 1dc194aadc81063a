"""Exception hierarchy shared by every module."""


class StratMoverError(Exception):
    """Base class for all package errors."""


class InputError(StratMoverError):
    """Malformed or inconsistent user input."""


class EmptyStrata(InputError):
    pass


class GroupMissing(InputError):
    pass


class InvariantViolation(InputError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class StrataCount(InputError):
    pass


class MalformedInterval(InputError):
    pass


class ParseError(InputError):
    def __init__(self, message: str, line: int | None = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)
        self.line = line


class MissingCell(ParseError):
    pass


class UnknownExample(InputError):
    pass


class Incomputable(StratMoverError):
    """A method cannot produce an interval for these data."""


class AllZeroVariances(Incomputable):
    pass


class DegenerateVariance(Incomputable):
    pass


class RefitUnavailable(Incomputable):
    pass


class ZeroDenominator(Incomputable):
    pass


class NonpositiveEstimate(Incomputable):
    pass


class ZeroPooledRate(Incomputable):
    pass


class NoConvergence(Incomputable):
    def __init__(self, message: str, bracket=None, residual=None):
        super().__init__(message)
        self.bracket = bracket
        self.residual = residual


class EmptyGroup(InputError):
    pass


class BeyondFollowUp(InputError):
    pass


class RegenerationLimit(StratMoverError):
    pass
