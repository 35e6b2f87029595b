"""Exception hierarchy for pwhid."""


class PwhidError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(PwhidError, ValueError):
    pass


class ModeError(PwhidError, IndexError):
    pass


class EmptyFactorsError(PwhidError, ValueError):
    pass


class ShapeError(PwhidError, ValueError):
    pass


class SignalLengthError(PwhidError, ValueError):
    pass


class DegenerateSignalError(PwhidError, ValueError):
    pass


class NormalizationError(PwhidError, ValueError):
    pass


class DegreeError(PwhidError, ValueError):
    pass


class InsufficientDataError(PwhidError, ValueError):
    pass


class IllConditionedError(PwhidError, ArithmeticError):
    """Design matrix too ill-conditioned for a trustworthy least-squares solve."""

    def __init__(self, condition: float, limit: float):
        self.condition = condition
        self.limit = limit
        super().__init__(
            f"design matrix condition estimate {condition:.3e} exceeds {limit:.1e}"
        )


class DivergenceError(PwhidError, ArithmeticError):
    pass


class ConfigError(PwhidError, ValueError):
    """Invalid experiment configuration; ``field`` names the offending entry."""

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)
