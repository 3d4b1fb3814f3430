"""Minimal deterministic tensor + reverse-mode differentiation core.

Only the layers, optimizer, and schedules the ranking model needs: valid
1D convolution over time, batch normalization, leaky ReLU, dropout,
global average pooling, dense layers, softmax, a sector-embedding add,
Adam, plateau LR halving, and early stopping. Everything is float64.
"""

from .autograd import (
    BatchNormState,
    Tensor,
    add,
    batch_norm,
    conv1d_valid,
    dense,
    dropout,
    embedding_add,
    global_avg_pool,
    leaky_relu,
    log_clip,
    matmul,
    mean,
    mul,
    softmax,
    tsum,
)
from .optim import AdamOptimizer, EarlyStopping, ReduceOnPlateau

__all__ = [
    "Tensor",
    "BatchNormState",
    "add",
    "mul",
    "matmul",
    "dense",
    "conv1d_valid",
    "embedding_add",
    "batch_norm",
    "leaky_relu",
    "dropout",
    "global_avg_pool",
    "softmax",
    "log_clip",
    "mean",
    "tsum",
    "AdamOptimizer",
    "ReduceOnPlateau",
    "EarlyStopping",
]
