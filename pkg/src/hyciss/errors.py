"""Exception types shared across the package."""


class HycissError(Exception):
    """Base class for all package errors."""


class NonFiniteError(HycissError):
    """A numerical quantity left the finite/stable regime (NaN, Inf, or a
    guarded denominator below its floor)."""


class ShapeMismatchError(HycissError):
    """Array arguments have incompatible shapes."""


class TaxonomyError(HycissError):
    """Base class for malformed class-tree documents."""


class CycleDetectedError(TaxonomyError):
    pass


class MultipleRootsError(TaxonomyError):
    pass


class DuplicateNameError(TaxonomyError):
    pass


class OrphanNodeError(TaxonomyError):
    pass


class UnknownNodeError(TaxonomyError):
    pass


class UnknownParentError(TaxonomyError):
    pass


class ScheduleError(HycissError):
    """Base class for invalid task schedules."""


class CountMismatchError(ScheduleError):
    pass


class BadParentError(ScheduleError):
    pass


class UnknownClassIdError(ScheduleError):
    pass


class ThresholdDepthMismatchError(HycissError):
    """Taxonomy is deeper than the per-level threshold list."""


class NoLabeledPixelsError(HycissError):
    """An operation requiring labeled pixels received none."""


class EmptyPartitionError(HycissError):
    """Metric partition contains no evaluable classes."""


class MissingRunError(HycissError):
    """Requested run artifacts are absent on disk."""


class ConfigError(HycissError):
    """Run configuration failed validation."""
