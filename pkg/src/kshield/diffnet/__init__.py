"""Reverse-mode autodiff, a small CNN with feature taps, and SGD training."""
from .tensor import DTYPE, Tensor, square, take_rows
from .ops import avg_pool2d, conv2d, cross_entropy, global_avg_pool, linear, relu, softmax
from .model import Checkpoint, ModelConfig, Network, accuracy, feature_tap, init_params, train

__all__ = [
    "DTYPE", "Tensor", "square", "take_rows",
    "avg_pool2d", "conv2d", "cross_entropy", "global_avg_pool", "linear", "relu", "softmax",
    "Checkpoint", "ModelConfig", "Network", "accuracy", "feature_tap", "init_params", "train",
]
