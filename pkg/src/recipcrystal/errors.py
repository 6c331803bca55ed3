"""Exception types raised across the package."""


class RecipCrystalError(Exception):
    """Base class for all package errors."""


class SingularLattice(RecipCrystalError):
    pass


class InvalidDenominator(RecipCrystalError):
    pass


class CollisionAfterSnap(RecipCrystalError):
    pass


class GenerationFailure(RecipCrystalError):
    pass


class OffGridTranslation(RecipCrystalError):
    pass


class WaveSetNotClosed(RecipCrystalError):
    pass


class NonIntegerMultiplicity(RecipCrystalError):
    pass


class DivergenceDetected(RecipCrystalError):
    pass


class ScalesNotFrozen(RecipCrystalError):
    pass


class EmptyCorpus(RecipCrystalError):
    pass


class ParseError(RecipCrystalError):
    """Malformed input file; ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ArchiveCorrupt(RecipCrystalError):
    pass


class ConfigError(RecipCrystalError):
    pass


class CheckpointMismatch(RecipCrystalError):
    pass
