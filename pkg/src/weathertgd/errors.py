"""Exception hierarchy for the weathertgd engine.

Every error raised by this package derives from :class:`WeatherTGDError`,
so callers can catch one base class at the CLI boundary. Input-validation
errors and provider/backend errors are kept on separate branches because
they map to different process exit codes.
"""

from __future__ import annotations


class WeatherTGDError(Exception):
    """Base class for all weathertgd errors."""


# --- input validation -------------------------------------------------------


class ValidationError(WeatherTGDError):
    """Bad user input: files, config, or series content."""


class MalformedInput(ValidationError):
    """Unparseable row, column, or file structure."""


class RangeViolation(ValidationError):
    """A value lies outside its physical bounds."""


class UnsortedTimestamps(ValidationError):
    """Timestamps not strictly increasing (includes duplicates)."""


class TooShort(ValidationError):
    """Series has fewer than two observations."""


class GapNotAllowed(ValidationError):
    """Missing value encountered while gaps are disallowed."""


class ConfigError(ValidationError):
    """Unknown or invalid configuration key/value."""


class TemplateError(ValidationError):
    """Prompt template missing, malformed, or with unresolved placeholders."""


class EmptyInput(ValidationError):
    """Metric input text was empty."""


class DegenerateTable(ValidationError):
    """Annotation table has no variance in pooled values."""


# --- backend / provider -----------------------------------------------------


class BackendError(WeatherTGDError):
    """Base class for completion-provider failures."""


class AuthError(BackendError):
    """Missing or rejected credential. Never retried."""


class RateLimited(BackendError):
    """Provider throttled the request. Retryable."""


class Timeout(BackendError):
    """Request timed out. Retryable."""


class ProviderError(BackendError):
    """Provider-side failure (5xx or malformed response). Retryable."""


class ExhaustedRetries(BackendError):
    """All retry attempts failed; the last cause is chained."""


class ScriptMiss(BackendError):
    """Scripted provider has no entry matching the request."""


# --- embeddings -------------------------------------------------------------


class DimensionMismatch(WeatherTGDError):
    """Vectors from different providers or of different dimensions."""


class ZeroVector(WeatherTGDError):
    """Cosine similarity requested against an all-zero embedding."""


# --- pipeline ---------------------------------------------------------------


class EmptyGradient(WeatherTGDError):
    """Agent response produced no valid fragments."""


class EmptyCaption(WeatherTGDError):
    """Caption-producing call returned empty text."""


class JudgeParseError(WeatherTGDError):
    """Judge response could not be parsed after the retry."""


class RunError(WeatherTGDError):
    """Optimization run failed; message carries iteration context."""


class ReplayDivergence(WeatherTGDError):
    """Replay did not reproduce the recorded run."""
