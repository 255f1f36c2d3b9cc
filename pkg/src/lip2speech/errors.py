"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class Lip2SpeechError(Exception):
    exit_code = 1


class UsageError(Lip2SpeechError):
    exit_code = 2


class InvalidInputError(Lip2SpeechError, ValueError):
    """Malformed arrays, wrong sample rate, length mismatches."""

    exit_code = 4


class DependencyError(Lip2SpeechError):
    """A pluggable backend (SSL model, ASR, vocoder) is unavailable."""

    exit_code = 3


class DataError(Lip2SpeechError):
    """Missing cache, bad manifest, degenerate corpus statistics."""

    exit_code = 4


class NumericalError(Lip2SpeechError, FloatingPointError):
    exit_code = 5
