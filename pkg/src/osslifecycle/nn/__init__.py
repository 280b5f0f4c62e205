"""Numpy neural building blocks with analytic gradients."""

from .checkpoint import CheckpointError, checkpoint_bytes, load_checkpoint, load_checkpoint_bytes, save_checkpoint
from .grad import GradientError, compute_gradients, forward_backward
from .layers import BatchNorm, Dropout, EncoderLayer, LayerNorm, Linear, Module, MultiHeadSelfAttention, ReLU, \
    Sequential, positional_encoding, scaled_dot_attention, sigmoid, softmax
from .losses import FocalLossConfig, cross_entropy, focal_loss, focal_loss_with_logits
from .models import HeavyConfig, HeavyModel, MLP, MlpConfig, TransformerConfig, TransformerEncoder, activate, \
    build_model, expert_config, heavy_config, light_config, mlp_forward, predict_logits, predict_proba, \
    stage1_config, transformer_encode

__all__ = [
    "BatchNorm", "CheckpointError", "Dropout", "EncoderLayer", "FocalLossConfig", "GradientError", "HeavyConfig",
    "HeavyModel", "LayerNorm", "Linear", "MLP", "MlpConfig", "Module", "MultiHeadSelfAttention", "ReLU",
    "Sequential", "TransformerConfig", "TransformerEncoder", "activate", "build_model", "checkpoint_bytes",
    "compute_gradients", "cross_entropy", "expert_config", "focal_loss", "focal_loss_with_logits",
    "forward_backward", "heavy_config", "light_config", "load_checkpoint", "load_checkpoint_bytes",
    "mlp_forward", "positional_encoding", "predict_logits", "predict_proba", "save_checkpoint",
    "scaled_dot_attention", "sigmoid", "softmax", "stage1_config", "transformer_encode",
]
