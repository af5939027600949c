"""Exception types shared across the package."""


class IfsLabError(Exception):
    """Base class for all package errors."""


class ConfigError(IfsLabError):
    """Invalid configuration, dataset spec, or config-file key."""


class DimensionMismatchError(IfsLabError):
    """Operands live in different ambient dimensions."""


class NumericError(IfsLabError):
    """NaN/Inf encountered where finite values are required."""


class UnsupportedInstanceError(IfsLabError):
    """Problem instance outside an operation's supported class."""


class KernelError(IfsLabError):
    """Selector kernel produced an invalid categorical distribution."""


class CertificationError(IfsLabError):
    """Contraction certification impossible (missing Lipschitz certificate)."""


class InstabilityError(IfsLabError):
    """Trajectory blew past the divergence guard."""


class NotConvergedError(IfsLabError):
    """Gradient requested from a non-converged Sinkhorn state."""


class SchemaError(IfsLabError):
    """Checkpoint layout does not match the requested architecture."""
