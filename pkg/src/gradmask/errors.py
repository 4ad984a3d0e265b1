"""Exception types raised across the package."""


class GradmaskError(Exception):
    """Base class for all package errors."""


class ConfigError(GradmaskError, ValueError):
    pass


class LengthError(GradmaskError, ValueError):
    pass


class VocabularyError(GradmaskError, ValueError):
    pass


class ShapeError(GradmaskError, ValueError):
    pass


class DegenerateInputError(GradmaskError, ValueError):
    pass


class LabelError(GradmaskError, ValueError):
    pass


class AlignmentError(GradmaskError, ValueError):
    pass


class ContractViolation(GradmaskError, ValueError):
    pass


class TemplateError(GradmaskError, ValueError):
    pass


class MalformedRecordError(GradmaskError, ValueError):
    pass


class IntegrityError(GradmaskError):
    """Checkpoint or corpus content does not match its manifest."""


class CompatibilityError(GradmaskError):
    """Checkpoint and corpus were built against different vocabularies."""


class NumericAbort(GradmaskError):
    """A training step produced a non-finite loss."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
