"""Exception hierarchy shared across the package."""


class FewgraphError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(FewgraphError):
    """Invalid configuration value, unknown config key, or broken invariant."""


class InsufficientClasses(FewgraphError):
    """The dataset does not hold enough classes for the requested split."""


class InsufficientSamples(FewgraphError):
    """A class does not hold enough samples for the requested draw."""


class IndexOutOfRange(FewgraphError, IndexError):
    """Session index outside the stream."""


class ShapeMismatch(FewgraphError):
    """Input shape does not match the configured extractor."""


class DimensionMismatch(FewgraphError):
    """Vector dimensionalities disagree."""


class DivergedLoss(FewgraphError):
    """Training loss became non-finite."""


class EmptyClass(FewgraphError):
    """No embedding carries the requested label."""


class UnevenClassSizes(FewgraphError):
    """Graph classes do not all hold the same number of nodes."""


class NoValidTriplet(FewgraphError):
    """No (anchor, positive, negative) triple can be mined from the batch."""


class DuplicateLabel(FewgraphError):
    """The same class label occurs twice where labels must be unique."""


class ZeroNormPrototype(FewgraphError):
    """A class feature has zero norm; cosine edges would be undefined."""


class ZeroNormQuery(FewgraphError):
    """A query embedding has zero norm; cosine scores would be undefined."""


class EmptyGraph(FewgraphError):
    """Prediction requested against a graph with no nodes."""


class LabelCollision(FewgraphError):
    """New class labels overlap labels already present in the graph."""


class UnknownLabel(FewgraphError):
    """A label is referenced that has no node in the graph."""


class IoError(FewgraphError, OSError):
    """Reading or writing a result/checkpoint file failed."""
