from __future__ import annotations

from typing import NamedTuple

import torch
from torch import nn

from . import bodymodel as bm
from .camera import CropContext, bbox_info
from .diffcore import check_finite
from .encoders import GlobalTemporalEncoder, InitialRegressor, LocalTemporalEncoder
from .features import Backbone
from .refine import RecurrentRefiner


class TarOutput(NamedTuple):
    estimates: list  # BodyParams for phi_init, phi_1 .. phi_L
    bodies: list  # BodyOutput for phi_init .. phi_{L-1}; the last estimate is not skinned here
    bank: torch.Tensor  # (B, 26, state_dim)
    global_feature: torch.Tensor  # (B, d)
    local_feature: torch.Tensor  # (B, D, h, w)


class TemporalRefiningNetwork(nn.Module):
    """Backbone -> global/local temporal encoders -> recurrent refinement, mid-frame output."""

    def __init__(self, cfg: dict, body: bm.BodyModel):
        super().__init__()
        self.cfg = dict(cfg)
        self.body = body
        self.ablate = cfg["model.ablate"]
        T = cfg["data.frames"]
        res = cfg["data.resolution"]
        d, D = cfg["features.global_dim"], cfg["features.local_dim"]
        self.backbone = Backbone(res, cfg["features.width"], d, D,
                                 global_pool=cfg["features.global_pool"])
        self.gte = None
        if self.ablate != "only-lte":
            self.gte = GlobalTemporalEncoder(T, d, cfg["gte.model_dim"], cfg["gte.layers"], cfg["gte.heads"],
                                             cfg["gte.mlp_dim"], cfg["gte.positional"])
            reg_in = cfg["gte.model_dim"]
        else:
            reg_in = d
        self.regressor = InitialRegressor(reg_in, cfg["regressor.state_dim"], cfg["regressor.hidden_dim"],
                                          head_init=cfg["regressor.head_init"])
        self.lte = None
        if self.ablate != "only-gte":
            self.lte = LocalTemporalEncoder(D, cfg["lte.window"], cfg["lte.kernel"], cfg["lte.variant"],
                                            cfg["lte.downsample_size"], res // 4, cfg["lte.paper_literal_eq2"])
        self.refiner = RecurrentRefiner(D, cfg["rrm.radius"], cfg["rrm.patch_dim"], cfg["rrm.hidden_dim"],
                                        cfg["rrm.iterations"], cfg["rrm.per_marker_routing"],
                                        cfg["rrm.detach_sampling_coords"], cfg["regressor.head_init"])
        if cfg["rrm.hidden_dim"] != cfg["regressor.state_dim"]:
            raise ValueError("refinement GRUs are initialized from the state bank; dims must match")

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def body_tensors(self) -> bm.BodyTensors:
        return self.body.tensors(self.dtype)

    def encode(self, images: torch.Tensor):
        """(B, T, C, H, W) -> (global feature (B, d'), local feature (B, D, h, w))."""
        feats = self.backbone(images)
        mid = (images.shape[1] - 1) // 2
        f = feats.global_[:, mid] if self.gte is None else self.gte(feats.global_)
        m = feats.local[:, mid] if self.lte is None else self.lte(feats.local)
        return f, m

    def forward(self, images: torch.Tensor, ctx: torch.Tensor, iterations: int | None = None) -> TarOutput:
        """``ctx`` holds the mid-frame crop rows (B, 6) of (c_x, c_y, s_bbox, f, W, H)."""
        crop = CropContext.from_array(ctx.to(self.dtype))
        cliff = bbox_info(crop)
        f, m = self.encode(images.to(self.dtype))
        check_finite("global feature", f)
        check_finite("local feature", m)
        phi0, bank = self.regressor(f, cliff)
        refined, bodies = self.refiner(bank, phi0, m, crop, cliff, self.body_tensors(), iterations)
        return TarOutput([phi0] + refined, bodies, bank, f, m)
