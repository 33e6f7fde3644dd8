"""Exception types shared across the package."""


class ShapeError(ValueError):
    """A tensor/weight dimension does not match what an operation expects."""


class GraphError(ValueError):
    """A network description is invalid or collapses at the given input size."""


class CheckpointError(IOError):
    """A checkpoint file is missing, truncated, or corrupt."""


class SpecMismatchError(ValueError):
    """A checkpoint's parameter slots do not match the network being built."""


class TrainingDivergedError(RuntimeError):
    """Loss or a gradient became non-finite during training."""
