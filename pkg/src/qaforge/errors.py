"""Exception types shared across the pipeline.

Every error raised by this package derives from :class:`PipelineError` so
callers can catch one base type at stage boundaries.
"""

from __future__ import annotations


class PipelineError(Exception):
    """Base class for all package-specific failures."""


class ConfigError(PipelineError):
    """A run configuration value is missing, malformed, or contradictory."""


class TemplateError(PipelineError):
    """A prompt template could not be rendered (unbound placeholder, bad id,
    or attachments passed to a text-only template)."""


class TransportError(PipelineError):
    """A backend call failed in a way that is worth retrying."""


class ScriptParseError(PipelineError):
    """A mock-script file contains a line that is not a valid entry."""


class ScriptMiss(PipelineError):
    """A scripted backend received a prompt with no matching script entry."""


class DimensionMismatch(PipelineError):
    """An embedding's dimension disagrees with the established one."""


class ProtocolError(PipelineError):
    """A model response does not follow the expected wire format."""


class FormatError(PipelineError):
    """A generated text violates a formatting rule (e.g. bullet lists in a
    visual description)."""


class SizeError(PipelineError):
    """An input exceeds the size an exhaustive routine will accept."""


class DegenerateInput(PipelineError):
    """Numerical input has no usable structure (e.g. too few vectors)."""


class BucketMismatch(PipelineError):
    """Two distributions were compared over different bucket sets."""


class EmptyInput(PipelineError):
    """An operation received an empty collection where content is required."""


class EmptyDecomposition(PipelineError):
    """A QA unit carries no source decomposition, so hops are undefined."""


class ProfileError(PipelineError):
    """Corpus profiling failed; the run cannot continue without a profile."""


class SchemaError(PipelineError):
    """A persisted artifact does not match the expected schema."""


class AuditError(PipelineError):
    """A post-run invariant audit failed."""
