"""Deformable cross-attention decoder for human mesh recovery, on a numpy autodiff core."""

__version__ = "0.1.0"

from .body import BodyTemplate, SmplParams, lbs_forward, make_synthetic_template, rot6d_to_matrix
from .config import DecoderConfig, RunConfig, load_config
from .decoder import Decoder, DeformableCrossAttention, extract_attention_hotspots
from .errors import (
    ConfigurationError,
    DimensionError,
    NumericError,
    ParameterError,
    StateError,
    TrainingError,
)
from .estimator import DeformableMeshRegressor
from .metrics import evaluate, mpjpe, pa_mpjpe, procrustes_align, pve
from .tensor import Tensor
from .training import HMRModel, train

__all__ = [
    "BodyTemplate",
    "ConfigurationError",
    "Decoder",
    "DecoderConfig",
    "DeformableCrossAttention",
    "DeformableMeshRegressor",
    "DimensionError",
    "HMRModel",
    "NumericError",
    "ParameterError",
    "RunConfig",
    "SmplParams",
    "StateError",
    "Tensor",
    "TrainingError",
    "evaluate",
    "extract_attention_hotspots",
    "lbs_forward",
    "load_config",
    "make_synthetic_template",
    "mpjpe",
    "pa_mpjpe",
    "procrustes_align",
    "pve",
    "rot6d_to_matrix",
    "train",
]
