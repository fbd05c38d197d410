"""Minimal numpy neural-network kernel: autodiff tensors, layers, Adam, gradient checks."""

from .gradcheck import GradCheckReport, check_module, finite_difference_check
from .layers import BatchNorm, Conv1d, Conv2d, Dense, Dropout, MaxPool2d, Module, ReLU, Softmax
from .optim import Adam, AdamState, adam_step
from .tensor import (GraphError, Tensor, adaptive_mean_matrix, batchnorm, concat, conv1d, conv2d,
                     cross_entropy, dropout, global_maxpool, matmul, maxpool2d, mean, mean_pool,
                     relu, reshape, softmax)

__all__ = [
    "Adam", "AdamState", "BatchNorm", "Conv1d", "Conv2d", "Dense", "Dropout", "GradCheckReport",
    "GraphError", "MaxPool2d", "Module", "ReLU", "Softmax", "Tensor", "adam_step",
    "adaptive_mean_matrix", "batchnorm", "check_module", "concat", "conv1d", "conv2d",
    "cross_entropy", "dropout", "finite_difference_check", "global_maxpool", "matmul",
    "maxpool2d", "mean", "mean_pool", "relu", "reshape", "softmax",
]
