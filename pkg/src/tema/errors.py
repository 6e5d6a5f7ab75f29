"""Exception types shared across the package.

Each error names a contract violation; modules raise these instead of bare
ValueError so callers (and the CLI) can map failures to diagnostics.
"""


class TemaError(Exception):
    """Base class for all package errors."""


# ---------------------------------------------------------------- numerics


class DimensionMismatch(TemaError):
    """Operand shapes are incompatible with the requested operation."""


class NotScalar(TemaError):
    """A 1x1 matrix was required (e.g. a loss) but something else was given."""


class ZeroVector(TemaError):
    """A vector that must have positive norm was zero."""


class EmptyInput(TemaError):
    """An operation received an empty operand (zero rows, empty list)."""


class BatchEmpty(TemaError):
    """The contrastive batch loss was called with an empty batch."""


# ------------------------------------------------------------- summarizing


class ProviderFailure(TemaError):
    """A summary or encoder provider could not produce an output."""


class RefinementExhausted(TemaError):
    """The summary refinement loop hit its iteration bound without passing.

    Carries the last attempted summary and the verdict that rejected it.
    """

    def __init__(self, message, summary, verdict):
        super().__init__(message)
        self.summary = summary
        self.verdict = verdict


# -------------------------------------------------------------------- I/O


class BadMagic(TemaError):
    """A binary file does not start with the expected magic bytes."""


class VersionMismatch(TemaError):
    """A binary file declares an unsupported format version."""


class CorruptRecord(TemaError):
    """A binary file ended early or contains an unreadable record."""


class FingerprintMismatch(TemaError):
    """A checkpoint was built under a different model configuration."""


class ParseError(TemaError):
    """A dataset line is not valid JSON."""

    def __init__(self, line_number, message):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class SchemaError(TemaError):
    """A dataset record violates the triplet schema."""

    def __init__(self, line_number, field, message):
        super().__init__(f"line {line_number}, field '{field}': {message}")
        self.line_number = line_number
        self.field = field


# ----------------------------------------------------------------- datasets


class DataEmpty(TemaError):
    """Training was asked to run on an empty dataset."""


class EmptyDataset(TemaError):
    """Statistics were requested for an empty record list."""


class DuplicateId(TemaError):
    """Two candidates or records share an identifier."""


# --------------------------------------------------------------- retrieval


class EmptyAfterExclusion(TemaError):
    """Excluding ids removed every candidate from the index."""


class SubsetMissingTarget(TemaError):
    """A query's curated subset does not contain its target."""


class EmptyEvaluation(TemaError):
    """Metric aggregation was asked to run over zero queries."""


class MissingCategory(TemaError):
    """A fashion-protocol record lacks the category field."""


# ---------------------------------------------------------------- training


class ConflictingFlags(TemaError):
    """The requested ablation flags contradict each other."""
