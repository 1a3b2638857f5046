"""Flat run configuration with full-path keys (``lte.window``), loaded from JSON."""
from __future__ import annotations

import json
import os
from pathlib import Path

DEFAULTS: dict = {
    "seed": 0,
    "data.frames": 9,
    "data.resolution": 64,
    "data.holdout_seqs": 0,
    "features.global_dim": 128,
    "features.local_dim": 32,
    "features.width": 16,
    "features.global_pool": "flatten",
    "gte.layers": 4,
    "gte.heads": 4,
    "gte.model_dim": 128,
    "gte.mlp_dim": 256,
    "gte.positional": "learned",
    "regressor.state_dim": 64,
    "regressor.hidden_dim": 64,
    "regressor.head_init": "small",
    "lte.window": 5,
    "lte.variant": "full",
    "lte.downsample_size": 8,
    "lte.kernel": 3,
    "lte.paper_literal_eq2": False,
    "rrm.iterations": 5,
    "rrm.radius": 3,
    "rrm.patch_dim": 8,
    "rrm.hidden_dim": 64,
    "rrm.per_marker_routing": False,
    "rrm.detach_sampling_coords": False,
    "model.ablate": "none",
    "loss.lambda_2d": 5.0,
    "loss.lambda_3d": 5.0,
    "loss.lambda_smpl": 1.0,
    "loss.gamma": 0.85,
    "train.steps": 1000,
    "train.batch_size": 8,
    "train.lr": 1e-3,
    "train.lr_final_fraction": 0.02,
    "train.grad_clip": 1.0,
    "train.log_every": 10,
    "train.eval_every": 0,
    "train.checkpoint_every": 0,
}

CHOICES = {
    "lte.variant": ("full", "downsampled"),
    "model.ablate": ("none", "only-gte", "only-lte"),
    "regressor.head_init": ("zero", "small", "default"),
    "gte.positional": ("learned", "none"),
    "features.global_pool": ("mean", "flatten"),
}


class ConfigError(ValueError):
    pass


def make_config(overrides: dict | None = None) -> dict:
    cfg = dict(DEFAULTS)
    for key, value in (overrides or {}).items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        default = DEFAULTS[key]
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{key!r} must be a boolean")
        elif isinstance(default, int) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{key!r} must be an integer")
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{key!r} must be a number")
            value = float(value)
        elif isinstance(default, str) and not isinstance(value, str):
            raise ConfigError(f"{key!r} must be a string")
        if key in CHOICES and value not in CHOICES[key]:
            raise ConfigError(f"{key!r} must be one of {CHOICES[key]}, got {value!r}")
        cfg[key] = value
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    T, L = cfg["data.frames"], cfg["lte.window"]
    if T % 2 == 0 or T < 1:
        raise ConfigError(f"data.frames must be odd, got {T}")
    if L % 2 == 0 or L > T or L < 1:
        raise ConfigError(f"lte.window must be odd and <= data.frames, got {L}")
    if cfg["data.resolution"] % 4:
        raise ConfigError("data.resolution must be divisible by 4")
    if not 0 < cfg["loss.gamma"] <= 1:
        raise ConfigError("loss.gamma must lie in (0, 1]")
    if cfg["rrm.iterations"] < 1:
        raise ConfigError("rrm.iterations must be >= 1")
    if cfg["gte.model_dim"] % cfg["gte.heads"]:
        raise ConfigError("gte.model_dim must be divisible by gte.heads")
    if cfg["train.lr"] <= 0:
        raise ConfigError("train.lr must be positive")


def load_config(path=None) -> dict:
    overrides = {}
    if path is not None:
        text = Path(path).read_text()
        overrides = json.loads(text)
        if not isinstance(overrides, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
    cfg = make_config(overrides)
    env_seed = os.environ.get("TAR_SEED")
    if env_seed is not None:
        cfg["seed"] = int(env_seed)
    return cfg
