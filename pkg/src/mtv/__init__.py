"""Multiview transformers for video classification on a numpy autodiff core."""

from .config import (
    EncoderConfig,
    FusionSpec,
    GlobalConfig,
    MTVConfig,
    TubeletSpec,
    ViewSpec,
    parse_variant,
    preset,
)
from .errors import CheckpointError, ConfigError, ContractError, DimensionError, MTVError, NonFiniteError
from .model import build_model, forward, load_checkpoint, multi_crop_inference, save_checkpoint
from .tensor import Tensor

__version__ = "0.1.0"
