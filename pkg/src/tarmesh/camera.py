"""Full-image perspective projection and crop geometry.

Crop cameras are (s, t_x, t_y). The full-image translation and the bounding-box
information vector follow the CLIFF conventions; the principal point sits at the
image center.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

MIN_SCALE = 1e-4
MIN_DEPTH = 1e-3


class DegenerateScaleError(ValueError):
    pass


class BehindCameraError(ValueError):
    pass


@dataclass
class CropContext:
    """Square crop in a full image. Fields may carry leading batch dimensions."""

    center: torch.Tensor  # (..., 2) pixels
    size: torch.Tensor  # (...,) pixels
    focal: torch.Tensor  # (...,) pixels
    image_size: torch.Tensor  # (..., 2) (W, H) pixels

    def __post_init__(self):
        if (self.size <= 0).any() or (self.focal <= 0).any():
            raise ValueError("crop size and focal length must be positive")

    @classmethod
    def make(cls, center, size, focal=1000.0, image_size=(1000.0, 1000.0), dtype=torch.float64):
        t = lambda x: torch.as_tensor(x, dtype=dtype)  # noqa: E731
        return cls(t(center), t(size), t(focal), t(image_size))

    @classmethod
    def from_array(cls, arr: torch.Tensor) -> "CropContext":
        """Unpack (..., 6) rows of (c_x, c_y, s_bbox, f, W, H)."""
        return cls(arr[..., 0:2], arr[..., 2], arr[..., 3], arr[..., 4:6])

    def as_array(self) -> torch.Tensor:
        lead = torch.broadcast_shapes(self.center.shape[:-1], self.size.shape, self.focal.shape,
                                      self.image_size.shape[:-1])
        return torch.cat([
            self.center.expand(lead + (2,)),
            self.size.expand(lead)[..., None],
            self.focal.expand(lead)[..., None],
            self.image_size.expand(lead + (2,)),
        ], dim=-1)

    def to(self, dtype) -> "CropContext":
        return CropContext(self.center.to(dtype), self.size.to(dtype), self.focal.to(dtype),
                           self.image_size.to(dtype))


def recover_translation(cam: torch.Tensor, ctx: CropContext, strict: bool = True) -> torch.Tensor:
    """Crop camera (..., 3) -> full-image translation (..., 3) in meters.

    With ``strict=False`` the scale is clamped to ``MIN_SCALE`` instead of
    raising, which keeps training alive through transient bad estimates.
    """
    s, tx, ty = cam.unbind(-1)
    if strict:
        if (s <= MIN_SCALE).any():
            raise DegenerateScaleError(f"crop scale must exceed {MIN_SCALE}, got {s.min().item():.3g}")
    else:
        s = s.clamp(min=MIN_SCALE)
    denom = s * ctx.size
    half = 0.5 * ctx.image_size
    return torch.stack([
        tx + 2.0 * (ctx.center[..., 0] - half[..., 0]) / denom,
        ty + 2.0 * (ctx.center[..., 1] - half[..., 1]) / denom,
        2.0 * ctx.focal / denom,
    ], dim=-1)


def translation_to_cam(t_full: torch.Tensor, ctx: CropContext) -> torch.Tensor:
    """Inverse of :func:`recover_translation`."""
    s = 2.0 * ctx.focal / (ctx.size * t_full[..., 2])
    denom = s * ctx.size
    half = 0.5 * ctx.image_size
    return torch.stack([
        s,
        t_full[..., 0] - 2.0 * (ctx.center[..., 0] - half[..., 0]) / denom,
        t_full[..., 1] - 2.0 * (ctx.center[..., 1] - half[..., 1]) / denom,
    ], dim=-1)


def project_full(points: torch.Tensor, t_full: torch.Tensor, ctx: CropContext,
                 strict: bool = True) -> torch.Tensor:
    """Pinhole projection of (..., K, 3) points shifted by (..., 3) into full-image pixels."""
    p = points + t_full[..., None, :]
    z = p[..., 2]
    if strict:
        bad = z <= MIN_DEPTH
        if bad.any():
            k = int(bad.nonzero()[0][-1])
            raise BehindCameraError(f"marker {k} is at or behind the camera (z={z[bad].min().item():.3g})")
    else:
        z = z.clamp(min=MIN_DEPTH)
    f = ctx.focal[..., None]
    half = 0.5 * ctx.image_size[..., None, :]
    return torch.stack([f * p[..., 0] / z, f * p[..., 1] / z], dim=-1) + half


def to_bbox_space(j_full: torch.Tensor, ctx: CropContext) -> torch.Tensor:
    return (j_full - ctx.center[..., None, :]) / ctx.size[..., None, None]


def from_bbox_space(j: torch.Tensor, ctx: CropContext) -> torch.Tensor:
    return j * ctx.size[..., None, None] + ctx.center[..., None, :]


def bbox_info(ctx: CropContext) -> torch.Tensor:
    half = 0.5 * ctx.image_size
    f = ctx.focal
    return torch.stack([
        (ctx.center[..., 0] - half[..., 0]) / f,
        (ctx.center[..., 1] - half[..., 1]) / f,
        ctx.size / f,
    ], dim=-1)


def project_to_bbox(points: torch.Tensor, cam: torch.Tensor, ctx: CropContext,
                    strict: bool = True) -> torch.Tensor:
    """Crop camera + body-frame points -> bbox-space keypoints."""
    t = recover_translation(cam, ctx, strict=strict)
    return to_bbox_space(project_full(points, t, ctx, strict=strict), ctx)
