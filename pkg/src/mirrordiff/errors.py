"""Exception types shared across the package."""


class MirrorDiffError(Exception):
    """Base class for all library errors."""


class PointOutsideSet(MirrorDiffError):
    """A point violates its constraint set (or sits inside the boundary guard)."""


class NonFiniteInput(MirrorDiffError):
    """An input array contains NaN or infinite entries."""


class RankDeficient(MirrorDiffError):
    """A token matrix is numerically rank-deficient."""


class InvalidSchedule(MirrorDiffError):
    """Noise-schedule parameters violate their preconditions."""


class StepOutOfRange(MirrorDiffError):
    """A diffusion step index lies outside {1, ..., T}."""


class DimensionMismatch(MirrorDiffError):
    """Array dimensions are inconsistent with the declared architecture or set."""


class EmptyBatch(MirrorDiffError):
    """An operation that needs at least one sample received none."""


class EmptyInput(MirrorDiffError):
    """A metric received an empty sample set."""


class RejectionBudgetExceeded(MirrorDiffError):
    """Rejection sampling acceptance rate fell below the configured budget."""


class NonFiniteElbo(MirrorDiffError):
    """The variational bound evaluated to a non-finite value."""


class OddDimension(MirrorDiffError):
    """Sinusoidal embeddings require an even width."""


class ConfigError(MirrorDiffError):
    """A run configuration is internally inconsistent (CLI validation failure)."""
