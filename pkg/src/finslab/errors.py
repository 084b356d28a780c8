"""Exception hierarchy shared by every finslab module."""


class FinslabError(Exception):
    """Base class for all library errors."""


class InvalidSpec(FinslabError, ValueError):
    """A metric/measure/domain description violates its invariants."""


class ZeroVector(FinslabError, ValueError):
    """An operation requiring a nonzero reference vector got F(v) <= eta."""


class NonConvergence(FinslabError, RuntimeError):
    """The Legendre transform's angular Newton iteration failed."""


class DegenerateFlag(FinslabError, ValueError):
    pass


class BadN(FinslabError, ValueError):
    """Dimension parameter N outside (2, inf]."""


class GeodesicFailure(FinslabError, RuntimeError):
    pass


class BallWraps(FinslabError, ValueError):
    """A forward ball is too large to sit inside one period of the torus."""


class NonPositive(FinslabError, ValueError):
    pass


class PositivityLost(FinslabError, RuntimeError):
    pass


class CFLViolation(FinslabError, ValueError):
    pass


class NoConvergence(FinslabError, RuntimeError):
    """Stationary solve stalled above the requested residual."""


class SnapshotMissing(FinslabError, KeyError):
    pass


class BetaOutOfRange(FinslabError, ValueError):
    pass


class ConditionsInfeasible(FinslabError, ValueError):
    pass


class ProfileInvalid(FinslabError, ValueError):
    pass


class DenominatorZero(FinslabError, ZeroDivisionError):
    pass


class BadInterval(FinslabError, ValueError):
    pass


class ConfigError(FinslabError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
