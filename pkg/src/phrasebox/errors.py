"""Exception types shared across the package."""


class PhraseboxError(Exception):
    """Base class for all package errors."""


class TooManyTokens(PhraseboxError):
    """Prompt exceeds the tokenizer's maximum input length."""


class CapTooSmall(PhraseboxError):
    """More positive categories than the prompt cap allows."""


class PoolTooSmall(PhraseboxError):
    """Negative-caption pool cannot supply the requested sample."""


class ShapeMismatch(PhraseboxError):
    """Array shapes disagree with the model configuration."""


class PhraseCountMismatch(PhraseboxError):
    """Target matrix width disagrees with the prompt's phrase count."""


class NoValidElements(PhraseboxError):
    """Every loss element was masked out."""


class DivergenceDetected(PhraseboxError):
    """Training loss became non-finite."""


class InsufficientData(PhraseboxError):
    """Dataset cannot satisfy the requested per-class instance count."""


class UnknownClass(PhraseboxError):
    """A rewrite refers to a class name the task does not contain."""


class TeacherLoadError(PhraseboxError):
    """Teacher checkpoint could not be loaded."""


class SpecInfeasible(PhraseboxError):
    """Corpus specification admits no training vocabulary."""


class ConfigError(PhraseboxError):
    """Declarative config failed validation; message lists every violation."""
