"""A small dense-tensor autodiff engine: 3D convolution, batch norm, pooling,
shared MLPs, Adam and a binary checkpoint format."""

from lgrnet.nncore import functional
from lgrnet.nncore.checkpoint import load_checkpoint, save_checkpoint
from lgrnet.nncore.layers import BatchNorm, Conv3d, Linear, Module, Parameter, SharedMLP
from lgrnet.nncore.optim import Adam, step_decay_lr
from lgrnet.nncore.tensor import (
    Tensor, as_tensor, concat, gather_rows, is_grad_enabled, no_grad, tensor)

__all__ = [
    "Adam", "BatchNorm", "Conv3d", "Linear", "Module", "Parameter", "SharedMLP", "Tensor",
    "as_tensor", "concat", "functional", "gather_rows", "is_grad_enabled", "load_checkpoint",
    "no_grad", "save_checkpoint", "step_decay_lr", "tensor",
]
