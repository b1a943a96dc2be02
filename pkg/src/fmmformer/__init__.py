"""Attention as a banded near field plus a low-rank far field."""
from .attention import AttentionConfig, BandedMatrix, BlendParams, ConfigError, fmm_attention
from .feature_maps import FeatureMapKind, FeatureMapSet
from .model import Model, TrainConfig, train
from .oracle import dense_fmm_matrix, dense_softmax_attention

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig",
    "BandedMatrix",
    "BlendParams",
    "ConfigError",
    "FeatureMapKind",
    "FeatureMapSet",
    "Model",
    "TrainConfig",
    "dense_fmm_matrix",
    "dense_softmax_attention",
    "fmm_attention",
    "train",
]
