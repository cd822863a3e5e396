"""Exception types shared across the package."""


class TensorLiftError(Exception):
    """Base class for all package errors."""


class DegenerateParams(TensorLiftError, ValueError):
    """A parameter stack has a zero row where a nondegenerate one is required."""


class DimensionMismatch(TensorLiftError, ValueError):
    pass


class BudgetExceeded(TensorLiftError, MemoryError):
    """Materializing a dense operator would exceed the configured entry budget."""


class ZeroTensor(TensorLiftError, ValueError):
    pass


class InvalidTopology(TensorLiftError, ValueError):
    pass


class InvalidPath(TensorLiftError, ValueError):
    pass


class InvalidParameters(TensorLiftError, ValueError):
    pass


class TopologyNotCertified(TensorLiftError):
    """The all-ones network test failed, so the requested guarantee does not apply."""


class ConfigError(TensorLiftError, ValueError):
    pass
