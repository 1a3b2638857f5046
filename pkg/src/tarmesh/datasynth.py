"""Procedural motion sequences, skeleton rasterization and the dataset file."""
from __future__ import annotations

import colorsys
import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, NamedTuple

import numpy as np
import torch

from . import bodymodel as bm
from .bodymodel import BodyParams
from .camera import CropContext, bbox_info, project_full, recover_translation, to_bbox_space, translation_to_cam
from .diffcore import load_container, save_container

DATASET_VERSION = 1

# per-joint amplitude scale relative to MotionConfig.amplitude
_JOINT_AMP = np.array([
    0.0, 1.0, 1.0, 0.4, 1.0, 1.0, 0.4, 0.6, 0.6, 0.4, 0.4, 0.4,
    0.5, 0.4, 0.4, 0.6, 1.0, 1.0, 1.0, 1.0, 0.6, 0.6, 0.4, 0.4,
])


@dataclass(frozen=True)
class MotionConfig:
    frames: int = 30
    amplitude: float = 0.45  # rad, bound on each sinusoid of a joint angle
    sinusoids: int = 3
    max_frequency: float = 0.15  # cycles / frame
    rest_offset: float = 0.3  # rad, static per-sequence pose offset bound
    orient_yaw: float = 0.6
    orient_amplitude: float = 0.15
    beta_range: float = 2.0
    depth_range: tuple = (4.5, 7.0)
    lateral_range: float = 0.8  # m
    drift_amplitude: float = 0.2  # m
    bbox_scale: float = 1.25
    center_jitter: float = 0.01  # fraction of bbox size
    size_jitter: float = 0.02
    focal: float = 1000.0
    image_size: tuple = (1000.0, 1000.0)
    resolution: int = 64
    noise: float = 0.08

    def __post_init__(self):
        if self.sinusoids < 1 or self.sinusoids > 4:
            raise ValueError("sinusoids must be in 1..4")
        if not 0 <= self.max_frequency <= 0.15:
            raise ValueError("max_frequency must be in [0, 0.15] cycles/frame")
        if self.amplitude < 0 or self.orient_amplitude < 0:
            raise ValueError("amplitudes must be non-negative")
        if not 0 <= self.beta_range <= 5:
            raise ValueError("beta_range must lie in [0, 5]")
        if self.depth_range[0] <= 1.5:
            raise ValueError("subjects must stay well in front of the camera")

    def max_angle_accel(self) -> float:
        """Upper bound on |second difference| of any generated joint angle."""
        a = max(self.amplitude * _JOINT_AMP.max(), self.orient_amplitude)
        return self.sinusoids * a * 4.0 * math.sin(math.pi * self.max_frequency) ** 2


@dataclass
class MotionSequence:
    theta: np.ndarray  # (T, 24, 3)
    beta: np.ndarray  # (T, 10)
    cam: np.ndarray  # (T, 3)
    ctx: np.ndarray  # (T, 6) c_x, c_y, s_bbox, f, W, H
    t_full: np.ndarray  # (T, 3)
    joints: np.ndarray  # (T, 24, 3) body frame
    markers: np.ndarray  # (T, 26, 3) body frame
    kp2d: np.ndarray  # (T, 26, 2) bbox space
    images: np.ndarray  # (T, 3, R, R)

    FIELDS = ("theta", "beta", "cam", "ctx", "t_full", "joints", "markers", "kp2d", "images")

    def __len__(self):
        return self.theta.shape[0]


class WindowSample(NamedTuple):
    frames: np.ndarray  # source frame indices, edge padded
    mid: int  # index of the supervised frame in the source sequence
    images: np.ndarray  # (T, 3, R, R)
    ctx: np.ndarray  # (T, 6)


def _sinusoid_track(rng, n, frames, amp, max_freq, shape):
    t = np.arange(frames)
    out = np.zeros((frames,) + shape)
    for _ in range(n):
        a = rng.uniform(0, amp, size=shape)
        f = rng.uniform(0.0, max_freq, size=shape)
        ph = rng.uniform(0, 2 * math.pi, size=shape)
        out += a * np.sin(2 * math.pi * f * t.reshape((-1,) + (1,) * len(shape)) + ph)
    return out


def generate_motion(model: bm.BodyModel, config: MotionConfig | None = None, seed: int = 0) -> MotionSequence:
    cfg = config or MotionConfig()
    rng = np.random.default_rng(seed)
    T = cfg.frames

    offsets = rng.uniform(-cfg.rest_offset, cfg.rest_offset, size=(24, 3)) * (_JOINT_AMP[:, None] > 0)
    theta = offsets + _sinusoid_track(rng, cfg.sinusoids, T, cfg.amplitude, cfg.max_frequency, (24, 3)) \
        * _JOINT_AMP[:, None]
    orient = np.array([0.0, rng.uniform(-cfg.orient_yaw, cfg.orient_yaw), 0.0])
    theta[:, 0] = orient + _sinusoid_track(rng, cfg.sinusoids, T, cfg.orient_amplitude, cfg.max_frequency, (3,))
    beta = np.repeat(rng.uniform(-cfg.beta_range, cfg.beta_range, size=(1, 10)), T, axis=0)

    depth = rng.uniform(*cfg.depth_range)
    base = np.array([rng.uniform(-cfg.lateral_range, cfg.lateral_range),
                     rng.uniform(-0.5 * cfg.lateral_range, 0.5 * cfg.lateral_range), depth])
    t_full = base + _sinusoid_track(rng, 1, T, cfg.drift_amplitude, 0.5 * cfg.max_frequency, (3,))

    bt = model.tensors(torch.float64)
    th = torch.as_tensor(theta)
    out = bm.body_forward(bt, th, torch.as_tensor(beta))
    tf = torch.as_tensor(t_full)
    W, H = cfg.image_size
    full = project_full(out.markers, tf, CropContext.make(torch.zeros(T, 2), torch.ones(T), cfg.focal, cfg.image_size))
    lo = full.min(dim=1).values.numpy()
    hi = full.max(dim=1).values.numpy()
    size = (hi - lo).max(axis=1) * cfg.bbox_scale * (1 + rng.uniform(-cfg.size_jitter, cfg.size_jitter, size=T))
    center = 0.5 * (lo + hi) + rng.uniform(-cfg.center_jitter, cfg.center_jitter, size=(T, 2)) * size[:, None]
    ctx_arr = np.concatenate([center, size[:, None], np.full((T, 1), cfg.focal),
                              np.tile([W, H], (T, 1))], axis=1)
    ctx = CropContext.from_array(torch.as_tensor(ctx_arr))
    cam = translation_to_cam(tf, ctx)
    kp2d = to_bbox_space(project_full(out.markers, recover_translation(cam, ctx), ctx), ctx)

    images = np.stack([
        rasterize(model, BodyParams(th[i], torch.as_tensor(beta[i]), cam[i]), ctx_arr[i], cfg.resolution,
                  noise=cfg.noise, noise_seed=(seed, i))
        for i in range(T)
    ])
    return MotionSequence(
        theta=theta, beta=beta, cam=cam.numpy(), ctx=ctx_arr, t_full=t_full,
        joints=out.joints.numpy(), markers=out.markers.numpy(), kp2d=kp2d.numpy(), images=images,
    )


def _segment_colors(n: int) -> np.ndarray:
    return np.array([colorsys.hsv_to_rgb((k * 11 % n) / n, 1.0, 1.0) for k in range(n)])


_TERMINAL_KEYS = tuple(bm._TERMINALS)
_N_BONES = len(bm.PARENTS) - 1 + len(_TERMINAL_KEYS)
_COLORS = _segment_colors(_N_BONES)
_BONE_RADIUS = np.concatenate([bm._BONE_RADIUS[1:], [bm._TERMINALS[j][1] for j in _TERMINAL_KEYS]])


def rasterize(model: bm.BodyModel, params: BodyParams, ctx, resolution: int = 64,
              noise: float = 0.08, noise_seed=0) -> np.ndarray:
    """Render the posed skeleton into a (3, R, R) crop with values in [0, 1].

    Bones are anti-aliased capsules colored per body part and shaded by depth
    relative to the root, composited far to near over uniform noise.
    """
    if isinstance(ctx, CropContext):
        ctx = ctx.as_array().detach()
    ctx_arr = torch.as_tensor(np.asarray(ctx, dtype=np.float64))
    crop = CropContext.from_array(ctx_arr)
    bt = model.tensors(torch.float64)
    theta = torch.as_tensor(params.theta, dtype=torch.float64)
    beta = torch.as_tensor(params.beta, dtype=torch.float64)
    cam = torch.as_tensor(params.cam, dtype=torch.float64)
    shaped, rest = bm.shape_and_regress(bt, beta)
    joints, transforms = bm.forward_kinematics(bt, theta, rest)
    tips = torch.stack([joints[j] + transforms[j, :3, :3] @ torch.as_tensor(bm._TERMINALS[j][0])
                        for j in _TERMINAL_KEYS])
    starts = torch.cat([joints[list(bm.PARENTS[1:])], joints[list(_TERMINAL_KEYS)]])
    ends = torch.cat([joints[1:], tips])

    t = recover_translation(cam, crop)
    pts = torch.cat([starts, ends])
    full = project_full(pts, t, crop, strict=False)
    px = ((to_bbox_space(full, crop) + 0.5) * resolution - 0.5).numpy()
    depth = (pts + t)[:, 2].numpy()
    n = _N_BONES
    a, b = px[:n], px[n:]
    zmid = 0.5 * (depth[:n] + depth[n:])
    root_z = float(joints[0, 2] + t[2])
    half_width = np.maximum(_BONE_RADIUS * crop.focal.item() / zmid / crop.size.item() * resolution, 0.75)
    shade = np.clip(1.0 - 1.5 * (zmid - root_z), 0.6, 1.0)

    rng = np.random.default_rng(noise_seed)
    img = rng.uniform(0.0, noise, size=(3, resolution, resolution))
    ys, xs = np.mgrid[0:resolution, 0:resolution].astype(np.float64)
    grid = np.stack([xs.ravel(), ys.ravel()], axis=1)
    for k in np.argsort(-zmid, kind="stable"):
        ab = b[k] - a[k]
        tt = np.clip(((grid - a[k]) @ ab) / max(ab @ ab, 1e-12), 0.0, 1.0)
        d = np.linalg.norm(grid - (a[k] + tt[:, None] * ab), axis=1)
        alpha = np.clip(half_width[k] + 0.5 - d, 0.0, 1.0).reshape(resolution, resolution)
        if not alpha.any():
            continue
        color = (_COLORS[k] * shade[k])[:, None, None]
        img = img * (1 - alpha) + alpha * color
    return img


def windows(seq_len: int, T: int, stride: int = 1) -> Iterator[tuple[np.ndarray, int]]:
    """Yield (frame indices, mid-frame) for sliding windows with edge repetition."""
    if T % 2 == 0:
        raise ValueError(f"window length must be odd, got {T}")
    half = (T - 1) // 2
    for mid in range(0, seq_len, stride):
        yield np.clip(np.arange(mid - half, mid + half + 1), 0, seq_len - 1), mid


def window_samples(seq: MotionSequence, T: int, stride: int = 1) -> Iterator[WindowSample]:
    for idx, mid in windows(len(seq), T, stride):
        yield WindowSample(idx, mid, seq.images[idx], seq.ctx[idx])


@dataclass
class Dataset:
    model: bm.BodyModel
    sequences: list
    meta: dict = field(default_factory=dict)

    @property
    def frames(self) -> int:
        return len(self.sequences[0]) if self.sequences else 0

    def stacked(self, name: str) -> np.ndarray:
        return np.stack([getattr(s, name) for s in self.sequences])

    def save(self, path) -> None:
        arrays = {f"model/{k}": v for k, v in self.model.arrays().items()}
        for name in MotionSequence.FIELDS:
            arrays[f"seq/{name}"] = self.stacked(name)
        meta = dict(self.meta)
        meta.update({
            "version": DATASET_VERSION,
            "n_sequences": len(self.sequences),
            "T_total": self.frames,
            "resolution": int(self.sequences[0].images.shape[-1]),
            "model": self.model.meta(),
        })
        save_container(path, arrays, meta=meta, kind="dataset")

    @classmethod
    def load(cls, path) -> "Dataset":
        arrays, manifest = load_container(path)
        if manifest.get("kind") != "dataset":
            raise ValueError(f"{path}: not a dataset file")
        meta = manifest["meta"]
        model = bm.BodyModel.from_arrays(arrays, meta["model"], prefix="model/")
        seqs = []
        for i in range(meta["n_sequences"]):
            seqs.append(MotionSequence(**{
                n: arrays[f"seq/{n}"][i].astype(np.float64 if n != "images" else np.float32)
                for n in MotionSequence.FIELDS
            }))
        meta = {k: v for k, v in meta.items() if k != "model"}
        return cls(model, seqs, meta)


def generate_dataset(n_sequences: int, frames: int, seed: int,
                     body: bm.SyntheticBodyConfig | None = None,
                     motion: MotionConfig | None = None) -> Dataset:
    body = body or bm.SyntheticBodyConfig()
    motion = motion or MotionConfig()
    if frames != motion.frames:
        motion = MotionConfig(**{**asdict(motion), "frames": frames})
    model = bm.make_synthetic_model(body, seed=seed)
    seqs = [generate_motion(model, motion, seed=seed * 100003 + i + 1) for i in range(n_sequences)]
    meta = {"seed": seed, "body_config": asdict(body), "motion_config": asdict(motion)}
    return Dataset(model, seqs, meta)


def cliff_vectors(ctx: np.ndarray) -> np.ndarray:
    return bbox_info(CropContext.from_array(torch.as_tensor(ctx))).numpy()
