"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, so raising the right class
matters more than the message text.
"""


class KinoplanError(Exception):
    """Base class for all package errors."""


class ConfigError(KinoplanError):
    """Invalid or unknown configuration (CLI exit code 2)."""


class MissingInputError(KinoplanError):
    """A required input file or directory is absent (CLI exit code 3)."""


class NumericalFailure(KinoplanError):
    """Non-finite values where finite ones are required (CLI exit code 4)."""


class DomainError(KinoplanError, ValueError):
    """An argument violates an operation's documented domain."""


class OutOfVocabularyError(DomainError):
    """A continuous action lies strictly outside the configured bin ranges."""


class ExpertFailure(KinoplanError):
    """The scripted expert could not produce a valid trajectory for a scene."""
