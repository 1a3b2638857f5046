"""Differentiable tensor substrate.

Forward kernels and the reverse-mode tape come from torch autograd (define-by-run,
rebuilt on every forward). This package adds the shape-checked primitive
catalog, a clamped bilinear sampler, an independent finite-difference checker,
a NaN-guarded Adam and the on-disk container format.
"""
from .container import ContainerError, load_container, read_manifest, save_container
from .errors import NonDeterministicError, NonFiniteError, ShapeError
from .gradcheck import analytic_grads, grad_check
from .ops import bilinear_sample, check_finite, op_catalog
from .optim import Adam

__all__ = [
    "Adam",
    "ContainerError",
    "NonDeterministicError",
    "NonFiniteError",
    "ShapeError",
    "analytic_grads",
    "backward",
    "bilinear_sample",
    "check_finite",
    "grad_check",
    "load_container",
    "op_catalog",
    "read_manifest",
    "save_container",
]


def backward(loss):
    """Accumulate gradients of a scalar ``loss`` into every reachable leaf."""
    if loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.backward()
