"""Minimal dense-tensor engine with reverse-mode differentiation."""

from . import ops
from .ops import (
    activation,
    affine,
    avg_pool3d,
    batch_norm,
    conv3d,
    conv3d_transpose,
    dropout,
    upsample3d_nearest,
)
from .rng import RngStream, mix_seed, splitmix64
from .tensor import DEFAULT_DTYPE, Tape, Tensor, as_tensor


def backward(tape: Tape, loss: Tensor, wrt):
    """Gradients of ``loss`` for each tensor in ``wrt`` (zeros where unused)."""
    return tape.backward(loss, wrt)


__all__ = [
    "DEFAULT_DTYPE", "RngStream", "Tape", "Tensor", "activation", "affine", "as_tensor",
    "avg_pool3d", "backward", "batch_norm", "conv3d", "conv3d_transpose", "dropout",
    "mix_seed", "ops", "splitmix64", "upsample3d_nearest",
]
