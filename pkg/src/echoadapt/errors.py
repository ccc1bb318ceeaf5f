"""Exception types raised across the toolkit."""


class EchoAdaptError(Exception):
    """Base class for all toolkit errors."""


# --- label remapping ---

class PlanError(EchoAdaptError):
    """Invalid remap plan."""


class UncoveredSourceClass(PlanError):
    """A source class has no entry in the plan."""


class TargetCollision(PlanError):
    """Two plan entries map onto the same target channel."""


class InvalidIdentity(PlanError):
    """An entry labeled identity pairs classes with different names."""


class SpaceMismatch(EchoAdaptError):
    """A mask belongs to a different label space than expected."""


# --- numerics ---

class NonPositiveSigma(EchoAdaptError):
    """Noise level must be strictly positive."""


class ShapeMismatch(EchoAdaptError):
    """Array arguments have incompatible shapes."""


class NonMonotoneSigma(EchoAdaptError):
    """Solver step received sigmas out of decreasing order."""


# --- network / adapters ---

class InvalidConfig(EchoAdaptError):
    """Network or run configuration violates an invariant."""


class AlreadyAdapted(EchoAdaptError):
    """Adapters are already attached to this network."""


class InvalidTargeting(EchoAdaptError):
    """Adapter targeting selects no layers or misses the mandatory group."""


class DoubleMerge(EchoAdaptError):
    """Adapter merged twice without an unmerge in between."""


# --- pipelines / data ---

class DataError(EchoAdaptError):
    """Dataset contents are malformed or missing."""


class ConfigError(EchoAdaptError):
    """Run configuration file is malformed."""


class PlanMismatch(EchoAdaptError):
    """Remap plan does not connect the dataset vocabulary to the model's."""


class InsufficientSynthetic(EchoAdaptError):
    """Not enough synthetic entries to honor the requested mixing ratio."""


class EmptySplit(EchoAdaptError):
    """A required manifest split has no entries."""


class SyntheticInEvaluation(EchoAdaptError):
    """An evaluation split contains synthetic entries."""


class GeometryError(EchoAdaptError):
    """Phantom chamber falls outside the imaging sector."""


# --- metrics / reporting ---

class NoForeground(EchoAdaptError):
    """Ground truth contains no foreground pixels."""


class DimensionMismatch(EchoAdaptError):
    """Embedding statistics have different dimensionality."""


class NonPSD(EchoAdaptError):
    """Covariance matrix is not positive semi-definite."""


class EmptyInput(EchoAdaptError):
    """An operation received an empty collection."""
