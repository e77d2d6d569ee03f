"""Exception types shared across the package."""


class NavpruneError(Exception):
    """Base class for all package errors."""


class DimensionError(NavpruneError, ValueError):
    """Tensor shapes are incompatible; the message names the offending axis."""


class ConfigurationError(NavpruneError, ValueError):
    """An architecture or pipeline configuration value is invalid."""


class DomainError(NavpruneError, ValueError):
    """A numeric argument lies outside its legal range."""


class AllocationInfeasibleError(DomainError):
    """The pruning budget cannot be met even with every block clamped."""


class GraphConsistencyError(NavpruneError, RuntimeError):
    """A producer/consumer axis mismatch was detected in the model graph."""


class ModelLoadError(NavpruneError, IOError):
    """A model file could not be loaded."""


class BadMagicError(ModelLoadError):
    """The file does not start with the expected magic bytes."""


class VersionMismatchError(ModelLoadError):
    """The file format version is not supported."""


class TruncatedModelError(ModelLoadError):
    """The file ended before all declared weight bytes were read."""


class ProfilerBusyError(NavpruneError, RuntimeError):
    """A profiling run was requested while another one is in progress."""
