"""Exception types shared across the package.

The CLI maps GraftriskError to exit code 1; anything else is a bug.
"""


class GraftriskError(Exception):
    """Base class for all domain errors raised by this package."""


class ConfigError(GraftriskError):
    """Invalid configuration; message names the offending field."""


class IngestError(GraftriskError):
    """Event ingestion failed hard (e.g. too many malformed lines)."""


class EmptyCohortError(GraftriskError):
    """An operation that needs events received none."""


class EmptyDatasetError(GraftriskError):
    """No usable data points survived labeling/filtering."""


class PatientLookupError(GraftriskError):
    """Referenced patient is not present in the event store."""


class SchemaError(GraftriskError):
    """Feature schema construction or alignment failed."""


class ModelContractError(GraftriskError):
    """Input does not match the model's feature schema."""


class ArtifactError(GraftriskError):
    """Model/zones artifact is corrupt or has an unsupported version."""


class StaleArtifactError(GraftriskError):
    """A derived artifact no longer matches the inputs it was built from."""


class MissingArtifactError(GraftriskError):
    """A required workspace artifact has not been produced yet."""


class UndefinedMetricError(GraftriskError):
    """Metric is undefined for the given inputs (e.g. single-class labels)."""


class SplitError(GraftriskError):
    """Patient-level splitting failed (too few patients, bad ratios)."""


class StudyDesignError(GraftriskError):
    """Reader-study constraints cannot be satisfied; names the constraint."""


class EstimateError(GraftriskError):
    """Estimate submission violated study rules (range, assignment)."""


class EstimateConflictError(EstimateError):
    """A different estimate already exists for this (reader, case, arm)."""
