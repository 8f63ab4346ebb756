"""Exception types shared across the package."""


class MTVError(Exception):
    """Base class for all package errors."""


class DimensionError(MTVError, ValueError):
    """Array shapes are incompatible with the requested operation."""


class ConfigError(MTVError, ValueError):
    """A model, fusion or run configuration is invalid."""


class ContractError(MTVError, ValueError):
    """A caller violated an operation's precondition."""


class CheckpointError(MTVError):
    """A checkpoint file is corrupted or does not match the expected model."""


class NonFiniteError(MTVError, FloatingPointError):
    """A forward computation produced NaN or Inf from finite inputs."""
