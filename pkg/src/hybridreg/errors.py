"""Exception hierarchy shared by every stage of the registration toolkit."""


class RegistrationError(Exception):
    """Base class for domain errors (CLI exit code 2)."""


class EmptyCloud(RegistrationError, ValueError):
    pass


class NonAscendingVoxels(RegistrationError, ValueError):
    pass


class CoordinateOutOfRange(RegistrationError, ValueError):
    pass


class TooFewPoints(RegistrationError, ValueError):
    pass


class ShapeMismatch(RegistrationError, ValueError):
    pass


class NonScalarOutput(RegistrationError, ValueError):
    pass


class NonPositiveDelta(RegistrationError, ValueError):
    pass


class SelectiveParamsNotAllowed(RegistrationError, ValueError):
    pass


class EmptyFeatures(RegistrationError, ValueError):
    pass


class EmptySet(RegistrationError, ValueError):
    pass


class TooFewCorrespondences(RegistrationError, ValueError):
    pass


class InsufficientPairs(RegistrationError, ValueError):
    pass


class DegenerateConfiguration(RegistrationError, ValueError):
    pass


class NoOverlap(RegistrationError):
    pass


class NoGroundTruthPairs(RegistrationError, ValueError):
    pass


class DivergedLoss(RegistrationError, FloatingPointError):
    pass


class InfeasibleOverlap(RegistrationError, ValueError):
    pass


class ParseError(RegistrationError, ValueError):
    """Malformed point file; ``line`` is 1-based."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnsupportedPlyFeature(RegistrationError, ValueError):
    pass
