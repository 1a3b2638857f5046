"""Recurrent refinement: 26 disentangled GRUs fed by features sampled at
projected body markers."""
from __future__ import annotations

from typing import NamedTuple

import torch
from torch import nn

from . import bodymodel as bm
from .camera import CropContext, project_to_bbox
from .diffcore import ops
from .encoders import N_STATES
from .layers import GroupedGRU, GroupedLinear, init_head

PARAM_DIM = 85
CLIFF_DIM = 3


def patch_offsets(radius: int, dtype=torch.float32) -> torch.Tensor:
    """(2r+1)^2 integer (dx, dy) offsets, row-major in dy."""
    r = torch.arange(-radius, radius + 1, dtype=dtype)
    dy, dx = torch.meshgrid(r, r, indexing="ij")
    return torch.stack([dx.reshape(-1), dy.reshape(-1)], dim=-1)


def sample_windows(m: torch.Tensor, j: torch.Tensor, radius: int) -> torch.Tensor:
    """Bilinearly sample (B, D, h, w) maps around (B, K, 2) bbox-space points -> (B, K, (2r+1)^2, D)."""
    b, _, h, w = m.shape
    k = j.shape[1]
    # crop spans [-0.5, 0.5] in bbox space; pixel centers sit at integer coordinates
    scale = torch.tensor([w, h], dtype=j.dtype)
    centers = (j + 0.5) * scale - 0.5
    pts = centers[:, :, None, :] + patch_offsets(radius, j.dtype)
    vals = ops.bilinear_sample(m, pts.reshape(b, -1, 2))
    return vals.reshape(b, k, pts.shape[2], -1)


class Feedback(NamedTuple):
    signal: torch.Tensor  # (B, 26*p + 85 + 3)
    patches: torch.Tensor  # (B, 26, p)
    keypoints: torch.Tensor  # (B, 26, 2) bbox space
    body: bm.BodyOutput


class RefineStep(NamedTuple):
    hidden: torch.Tensor
    delta: bm.BodyParams


class RecurrentRefiner(nn.Module):
    def __init__(self, local_dim: int, radius: int = 3, patch_dim: int = 8, hidden: int = 64,
                 iterations: int = 5, per_marker_routing: bool = False, detach_sampling_coords: bool = False,
                 head_init: str = "small"):
        super().__init__()
        self.radius = radius
        self.patch_dim = patch_dim
        self.iterations = iterations
        self.routing = per_marker_routing
        self.detach_coords = detach_sampling_coords
        n = (2 * radius + 1) ** 2
        self.compress = nn.Linear(n * local_dim, patch_dim)
        in_dim = patch_dim + PARAM_DIM + CLIFF_DIM if per_marker_routing else \
            N_STATES * patch_dim + PARAM_DIM + CLIFF_DIM
        self.gru = GroupedGRU(N_STATES, in_dim, hidden)
        self.rot_head = GroupedLinear(24, hidden, 3)
        self.shape_head = GroupedLinear(1, hidden, 10)
        self.cam_head = GroupedLinear(1, hidden, 3)
        for head in (self.rot_head, self.shape_head, self.cam_head):
            init_head(head.weight, head.bias, head_init)

    @property
    def signal_dim(self) -> int:
        return N_STATES * self.patch_dim + PARAM_DIM + CLIFF_DIM

    def sample_patch(self, m: torch.Tensor, j: torch.Tensor) -> torch.Tensor:
        """(B, D, h, w), (B, K, 2) -> compressed patches (B, K, p)."""
        vals = sample_windows(m, j, self.radius)
        return self.compress(vals.flatten(-2))

    def build_feedback(self, bt: bm.BodyTensors, ctx: CropContext, m: torch.Tensor,
                       phi: bm.BodyParams, cliff: torch.Tensor) -> Feedback:
        body = bm.body_forward(bt, phi.theta, phi.beta)
        j = project_to_bbox(body.markers, phi.cam, ctx, strict=False)
        coords = j.detach() if self.detach_coords else j
        patches = self.sample_patch(m, coords)
        signal = torch.cat([patches.flatten(-2), phi.flat(), cliff], dim=-1)
        return Feedback(signal, patches, j, body)

    def step(self, hidden: torch.Tensor, fb: Feedback, phi: bm.BodyParams) -> RefineStep:
        if self.routing:
            ctxv = fb.signal[..., N_STATES * self.patch_dim:]
            x = torch.cat([fb.patches, ctxv[..., None, :].expand(-1, N_STATES, -1)], dim=-1)
            hidden = self.gru(x, hidden)
        else:
            hidden = self.gru(fb.signal, hidden, shared=True)
        delta = bm.BodyParams(
            self.rot_head(hidden[..., :24, :]),
            self.shape_head(hidden[..., 24:25, :])[..., 0, :],
            self.cam_head(hidden[..., 25:26, :])[..., 0, :],
        )
        return RefineStep(hidden, delta)

    def forward(self, bank: torch.Tensor, phi: bm.BodyParams, m: torch.Tensor, ctx: CropContext,
                cliff: torch.Tensor, bt: bm.BodyTensors, iterations: int | None = None):
        """Return ([phi_1 .. phi_n], [body outputs of phi_0 .. phi_{n-1}])."""
        hidden = bank
        estimates, bodies = [], []
        for _ in range(self.iterations if iterations is None else iterations):
            fb = self.build_feedback(bt, ctx, m, phi, cliff)
            hidden, delta = self.step(hidden, fb, phi)
            phi = bm.BodyParams(*(a + b for a, b in zip(phi, delta)))
            estimates.append(phi)
            bodies.append(fb.body)
        return estimates, bodies
