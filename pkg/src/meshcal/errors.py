"""Exception types shared across the package."""


class CalibrationError(Exception):
    """Base class for per-epoch calibration failures."""


class MissingRange(CalibrationError):
    def __init__(self, i: int, j: int):
        super().__init__(f"range {i}<->{j} is missing")
        self.pair = (i, j)


class DegenerateFrame(CalibrationError):
    pass


class ImaginaryRoot(CalibrationError):
    pass


class InsufficientReferences(CalibrationError):
    pass


class NoConvergence(CalibrationError):
    pass


class Ambiguous(CalibrationError):
    """Mirror solutions fit the references equally well."""

    def __init__(self, message: str, candidates=None):
        super().__init__(message)
        self.candidates = candidates


class AllMassZero(CalibrationError):
    pass


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)
        self.line = line


class DimensionMismatch(ParseError):
    pass


class NonmonotoneTimestamps(UserWarning):
    pass


class LayoutInfeasible(ValueError):
    pass


class NoTruth(ValueError):
    pass


class InsufficientData(ValueError):
    pass


class ConfigError(ValueError):
    pass
