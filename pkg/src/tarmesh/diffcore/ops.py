"""Differentiable primitives used across the network.

Every primitive is a thin, shape-checked wrapper over a torch kernel so the
autograd tape records it; ``bilinear_sample`` is implemented here directly.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F

from .errors import NonFiniteError, ShapeError


def _require(cond: bool, op: str, *shapes) -> None:
    if not cond:
        raise ShapeError(op, *[tuple(s) for s in shapes])


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _require(a.dim() >= 1 and b.dim() >= 1 and a.shape[-1] == b.shape[-2 if b.dim() > 1 else 0],
             "matmul", a.shape, b.shape)
    return torch.matmul(a, b)


def conv2d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
           stride: int = 1, padding: int = 0) -> torch.Tensor:
    _require(x.dim() == 4 and weight.dim() == 4 and x.shape[1] == weight.shape[1],
             "conv2d", x.shape, weight.shape)
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def conv_transpose2d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
                     stride: int = 1, padding: int = 0) -> torch.Tensor:
    _require(x.dim() == 4 and weight.dim() == 4 and x.shape[1] == weight.shape[0],
             "conv_transpose2d", x.shape, weight.shape)
    return F.conv_transpose2d(x, weight, bias, stride=stride, padding=padding)


def conv1d_temporal(x: torch.Tensor, kernel: torch.Tensor, padding: int = 0) -> torch.Tensor:
    """Convolve ``x`` of shape (B, T, C) along T with a kernel of shape (K,).

    The same temporal kernel is applied to every channel; output is (B, T', C).
    """
    _require(x.dim() == 3 and kernel.dim() == 1 and kernel.shape[0] <= x.shape[1] + 2 * padding,
             "conv1d_temporal", x.shape, kernel.shape)
    b, t, c = x.shape
    xc = x.transpose(1, 2).reshape(b * c, 1, t)
    out = F.conv1d(xc, kernel.view(1, 1, -1), padding=padding)
    return out.view(b, c, -1).transpose(1, 2)


def _binary(op: str, fn, a, b):
    if isinstance(a, torch.Tensor) and isinstance(b, torch.Tensor):
        try:
            torch.broadcast_shapes(a.shape, b.shape)
        except RuntimeError:
            raise ShapeError(op, tuple(a.shape), tuple(b.shape)) from None
    return fn(a, b)


def add(a, b):
    return _binary("add", torch.add, a, b)


def sub(a, b):
    return _binary("sub", torch.sub, a, b)


def mul(a, b):
    return _binary("mul", torch.mul, a, b)


sigmoid = torch.sigmoid
tanh = torch.tanh


def relu(x: torch.Tensor) -> torch.Tensor:
    # torch's backward masks with (out > 0), so the derivative at exactly 0 is 0
    return torch.relu(x)


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.softmax(x, dim=dim)


def layer_norm(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor,
               eps: float = 1e-5) -> torch.Tensor:
    _require(weight.shape == x.shape[-weight.dim():], "layer_norm", x.shape, weight.shape)
    return F.layer_norm(x, tuple(weight.shape), weight, bias, eps)


def mean(x: torch.Tensor, dim=None, keepdim: bool = False) -> torch.Tensor:
    return x.mean() if dim is None else x.mean(dim=dim, keepdim=keepdim)


def sum(x: torch.Tensor, dim=None, keepdim: bool = False) -> torch.Tensor:  # noqa: A001
    return x.sum() if dim is None else x.sum(dim=dim, keepdim=keepdim)


def concat(tensors, dim: int = -1) -> torch.Tensor:
    ref = tensors[0].shape
    d = dim % len(ref)
    for t in tensors[1:]:
        _require(t.dim() == len(ref) and all(t.shape[i] == ref[i] for i in range(len(ref)) if i != d),
                 "concat", ref, t.shape)
    return torch.cat(tensors, dim=dim)


def slice_(x: torch.Tensor, dim: int, start: int, stop: int) -> torch.Tensor:
    _require(0 <= start <= stop <= x.shape[dim], "slice", x.shape, (start, stop))
    return x.narrow(dim, start, stop - start)


def reshape(x: torch.Tensor, shape) -> torch.Tensor:
    n = 1
    free = 0
    for s in shape:
        if s == -1:
            free += 1
        else:
            n *= s
    ok = free <= 1 and (x.numel() == n if free == 0 else n > 0 and x.numel() % n == 0)
    _require(ok, "reshape", x.shape, tuple(shape))
    return x.reshape(shape)


def transpose(x: torch.Tensor, dim0: int, dim1: int) -> torch.Tensor:
    return x.transpose(dim0, dim1)


def bilinear_sample(fmap: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Sample ``fmap`` (B, C, H, W) at fractional pixel ``coords`` (B, N, 2) as (x, y).

    Coordinates outside the map are clamped to the border. Returns (B, N, C).
    Integer coordinates return the stored value exactly.
    """
    _require(fmap.dim() == 4 and coords.dim() == 3 and coords.shape[-1] == 2
             and coords.shape[0] == fmap.shape[0], "bilinear_sample", fmap.shape, coords.shape)
    b, c, h, w = fmap.shape
    x = coords[..., 0].clamp(0, w - 1)
    y = coords[..., 1].clamp(0, h - 1)
    x0 = x.detach().floor().clamp(max=w - 1)
    y0 = y.detach().floor().clamp(max=h - 1)
    wx = x - x0
    wy = y - y0
    x0i = x0.long()
    y0i = y0.long()
    x1i = (x0i + 1).clamp(max=w - 1)
    y1i = (y0i + 1).clamp(max=h - 1)

    flat = fmap.reshape(b, c, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).unsqueeze(1).expand(b, c, -1)
        return flat.gather(2, idx)

    v00 = gather(y0i, x0i)
    v01 = gather(y0i, x1i)
    v10 = gather(y1i, x0i)
    v11 = gather(y1i, x1i)
    wx = wx.unsqueeze(1)
    wy = wy.unsqueeze(1)
    top = v00 + (v01 - v00) * wx
    bottom = v10 + (v11 - v10) * wx
    out = top + (bottom - top) * wy
    return out.transpose(1, 2)


def check_finite(name: str, t: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"non-finite values in {name}")
    return t


def op_catalog() -> dict[str, object]:
    """Name -> callable for every differentiable primitive."""
    return {
        "matmul": matmul,
        "conv2d": conv2d,
        "conv_transpose2d": conv_transpose2d,
        "conv1d_temporal": conv1d_temporal,
        "add": add,
        "sub": sub,
        "mul": mul,
        "sigmoid": sigmoid,
        "tanh": tanh,
        "relu": relu,
        "softmax": softmax,
        "layer_norm": layer_norm,
        "mean": mean,
        "sum": sum,
        "concat": concat,
        "slice": slice_,
        "reshape": reshape,
        "transpose": transpose,
        "bilinear_sample": bilinear_sample,
    }
