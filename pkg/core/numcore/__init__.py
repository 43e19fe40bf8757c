from core.numcore.tensor import (
    Tensor, Tape, Gradients, backward, precision, get_default_dtype, as_tensor, parameter,
    concat, stack
)
from core.numcore.ops import (
    matmul, conv2d, conv2d_transpose, activation, relu, tanh, sigmoid,
    batch_norm, BatchNormStats, lstm_cell, unit_normalize
)
from core.numcore.losses import mse_loss, sobel_loss, region_max_mse, generator_loss
from core.numcore.optim import AdamState, adam_step, sgd_step

__all__ = [
    'Tensor', 'Tape', 'Gradients', 'backward', 'precision', 'get_default_dtype', 'as_tensor', 'parameter',
    'concat', 'stack',
    'matmul', 'conv2d', 'conv2d_transpose', 'activation', 'relu', 'tanh', 'sigmoid',
    'batch_norm', 'BatchNormStats', 'lstm_cell', 'unit_normalize',
    'mse_loss', 'sobel_loss', 'region_max_mse', 'generator_loss',
    'AdamState', 'adam_step', 'sgd_step'
]
