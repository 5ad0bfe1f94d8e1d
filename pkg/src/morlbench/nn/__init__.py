"""Minimal dense-network substrate: layers with explicit backward passes,
losses, Adam, finite-difference checks and JSON checkpoints."""
from .checkpoint import load_checkpoint, load_mlp, save_checkpoint, save_mlp
from .gradcheck import check_module_gradients, max_relative_error, numerical_gradient
from .layers import Embedding, LayerNorm, Linear, Module, ReLU, Tanh, sigmoid
from .losses import log_softmax, logsumexp, softmax, softmax_cross_entropy, squared_error
from .mlp import Mlp
from .optim import Adam, AdamState, adam_step

__all__ = [
    "Adam", "AdamState", "Embedding", "LayerNorm", "Linear", "Mlp", "Module", "ReLU", "Tanh",
    "adam_step", "check_module_gradients", "load_checkpoint", "load_mlp", "log_softmax",
    "logsumexp", "max_relative_error", "numerical_gradient", "save_checkpoint", "save_mlp",
    "sigmoid", "softmax", "softmax_cross_entropy", "squared_error",
]
