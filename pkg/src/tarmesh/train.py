"""Multi-stage losses and the training loop (mid-frame supervision)."""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch

from . import bodymodel as bm
from .camera import CropContext, project_to_bbox
from .config import make_config
from .datasynth import Dataset
from .diffcore import Adam, load_container, save_container
from .model import TemporalRefiningNetwork

CHECKPOINT_KIND = "checkpoint"


class TrainingError(RuntimeError):
    pass


class Targets(NamedTuple):
    theta: torch.Tensor  # (B, 24, 3)
    beta: torch.Tensor  # (B, 10)
    joints: torch.Tensor  # (B, 24, 3) body frame
    kp2d: torch.Tensor  # (B, 26, 2) bbox space


class Batch(NamedTuple):
    images: torch.Tensor  # (B, T, 3, R, R)
    ctx: torch.Tensor  # (B, 6) mid-frame crop
    targets: Targets
    index: np.ndarray  # (B, 2) sequence, mid-frame


def _sq(x: torch.Tensor, dims: int) -> torch.Tensor:
    return (x ** 2).flatten(-dims).sum(-1)


def stage_loss(pred: bm.BodyParams, targets: Targets, cfg: dict, bt: bm.BodyTensors, ctx: CropContext,
               body: bm.BodyOutput | None = None):
    """Weighted squared-error loss of one estimate. Returns (scalar, parts dict).

    Each term is a squared sum per sample averaged over the batch; 3D joints are
    root-aligned and 2D markers are compared in bbox space.
    """
    for name, a, b in (("theta", pred.theta, targets.theta), ("beta", pred.beta, targets.beta)):
        if a.shape != b.shape:
            raise ValueError(f"stage_loss: {name} shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if body is None:
        body = bm.body_forward(bt, pred.theta, pred.beta)
    if body.joints.shape != targets.joints.shape:
        raise ValueError(f"stage_loss: joints shape mismatch {tuple(body.joints.shape)} vs "
                         f"{tuple(targets.joints.shape)}")
    kp = project_to_bbox(body.markers, pred.cam, ctx, strict=False)
    if kp.shape != targets.kp2d.shape:
        raise ValueError(f"stage_loss: kp2d shape mismatch {tuple(kp.shape)} vs {tuple(targets.kp2d.shape)}")
    pj = body.joints - body.joints[..., :1, :]
    gj = targets.joints - targets.joints[..., :1, :]
    parts = {
        "2d": _sq(kp - targets.kp2d, 2).mean(),
        "3d": _sq(pj - gj, 2).mean(),
        "smpl": (_sq(pred.theta - targets.theta, 2) + _sq(pred.beta - targets.beta, 1)).mean(),
    }
    loss = (cfg["loss.lambda_2d"] * parts["2d"] + cfg["loss.lambda_3d"] * parts["3d"]
            + cfg["loss.lambda_smpl"] * parts["smpl"])
    return loss, parts


def stage_weights(gamma: float, L: int) -> list[float]:
    """[gamma^L, ..., gamma, 1] for stages l = 0..L."""
    return [gamma ** (L - l) for l in range(L + 1)]


def total_loss(stage_losses, cfg: dict):
    L = cfg["rrm.iterations"]
    if len(stage_losses) != L + 1:
        raise ValueError(f"expected {L + 1} stage losses, got {len(stage_losses)}")
    total = 0.0
    for w, s in zip(stage_weights(cfg["loss.gamma"], L), stage_losses):
        total = total + w * s
    return total


def model_loss(model: TemporalRefiningNetwork, batch: Batch):
    """Forward pass plus the weighted sum over all stages -> (total, [stage losses])."""
    out = model(batch.images, batch.ctx)
    crop = CropContext.from_array(batch.ctx.to(model.dtype))
    bt = model.body_tensors()
    stages = []
    for l, est in enumerate(out.estimates):
        body = out.bodies[l] if l < len(out.bodies) else None
        stages.append(stage_loss(est, batch.targets, model.cfg, bt, crop, body)[0])
    return total_loss(stages, model.cfg), stages


def split_indices(dataset: Dataset, cfg: dict):
    """(train, holdout) sequence indices; the holdout is the last sequences."""
    n = len(dataset.sequences)
    h = cfg["data.holdout_seqs"]
    if h >= n:
        raise ValueError(f"holdout of {h} sequences leaves nothing to train on ({n} total)")
    return list(range(n - h)), list(range(n - h, n))


def make_batch(dataset: Dataset, seq_ids, mids, T: int, dtype=torch.float32) -> Batch:
    images, ctx, theta, beta, joints, kp2d = [], [], [], [], [], []
    for s, mid in zip(seq_ids, mids):
        seq = dataset.sequences[s]
        half = (T - 1) // 2
        idx = np.clip(np.arange(mid - half, mid + half + 1), 0, len(seq) - 1)
        images.append(seq.images[idx])
        ctx.append(seq.ctx[mid])
        theta.append(seq.theta[mid])
        beta.append(seq.beta[mid])
        joints.append(seq.joints[mid])
        kp2d.append(seq.kp2d[mid])
    t = lambda xs: torch.as_tensor(np.stack(xs), dtype=dtype)
    return Batch(t(images), t(ctx), Targets(t(theta), t(beta), t(joints), t(kp2d)),
                 np.stack([np.asarray(seq_ids), np.asarray(mids)], axis=-1))


def sample_batch(dataset: Dataset, train_ids, cfg: dict, step: int) -> Batch:
    """Batch for a given step; depends only on (seed, step)."""
    rng = np.random.default_rng([cfg["seed"], step])
    B = cfg["train.batch_size"]
    seqs = rng.choice(np.asarray(train_ids), size=B)
    mids = rng.integers(0, dataset.frames, size=B)
    return make_batch(dataset, seqs, mids, cfg["data.frames"])


def learning_rate(cfg: dict, step: int) -> float:
    """Cosine decay from train.lr to train.lr * train.lr_final_fraction."""
    lr, frac, steps = cfg["train.lr"], cfg["train.lr_final_fraction"], max(cfg["train.steps"], 1)
    t = min(step / steps, 1.0)
    return lr * (frac + (1 - frac) * 0.5 * (1 + math.cos(math.pi * t)))


def build_model(cfg: dict, body: bm.BodyModel) -> TemporalRefiningNetwork:
    torch.manual_seed(cfg["seed"])
    return TemporalRefiningNetwork(cfg, body)


def save_checkpoint(path, model: TemporalRefiningNetwork, opt: Adam | None, step: int) -> None:
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    arrays.update({f"body/{k}": v for k, v in model.body.arrays().items()})
    if opt is not None:
        arrays.update(opt.state_tensors())
    meta = {"step": step, "config": model.cfg, "body": model.body.meta()}
    save_container(path, arrays, meta=meta, kind=CHECKPOINT_KIND)


def load_checkpoint(path, cfg_override: dict | None = None):
    """-> (model, arrays, meta). ``cfg_override`` entries are applied on top of
    the stored config; shape compatibility is then checked per parameter."""
    arrays, manifest = load_container(path)
    if manifest.get("kind") != CHECKPOINT_KIND:
        raise ValueError(f"{path}: not a checkpoint")
    meta = manifest["meta"]
    cfg = make_config({**meta["config"], **(cfg_override or {})})
    body = bm.BodyModel.from_arrays(arrays, meta["body"], prefix="body/")
    model = build_model(cfg, body)
    load_params(model, arrays, allow_unused=bool(cfg_override))
    return model, arrays, meta


def load_params(model: TemporalRefiningNetwork, arrays: dict, allow_unused: bool = False) -> None:
    """Copy ``param/*`` arrays into the model. Shapes must match exactly; with
    ``allow_unused`` extra checkpoint parameters (e.g. an encoder the model
    ablates) are ignored."""
    state = model.state_dict()
    if not allow_unused:
        extra = [k[6:] for k in arrays if k.startswith("param/") and k[6:] not in state]
        if extra:
            raise ValueError(f"checkpoint has parameters the model lacks: {', '.join(extra[:5])}")
    missing = [k for k in state if f"param/{k}" not in arrays]
    if missing:
        raise ValueError(f"checkpoint lacks parameters: {', '.join(missing[:5])}")
    new = {}
    for k, v in state.items():
        a = arrays[f"param/{k}"]
        if tuple(a.shape) != tuple(v.shape):
            raise ValueError(f"parameter {k}: checkpoint shape {tuple(a.shape)} vs model shape {tuple(v.shape)}")
        new[k] = torch.as_tensor(a, dtype=v.dtype)
    model.load_state_dict(new)


class TrainResult(NamedTuple):
    model: TemporalRefiningNetwork
    step: int
    log: list


def train_run(dataset: Dataset, cfg: dict, out_dir, resume=None, eval_fn=None, verbose=False) -> TrainResult:
    """Train for ``train.steps`` steps, writing ``log.jsonl`` and ``checkpoint.tarc`` under ``out_dir``.

    ``resume`` is a checkpoint path; training continues from its step with its
    optimizer state. ``eval_fn(model, holdout_ids)`` overrides the periodic
    holdout evaluation.
    """
    from .evaluation import evaluate

    torch.use_deterministic_algorithms(True)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_ids, holdout = split_indices(dataset, cfg)
    model = build_model(cfg, dataset.model)
    opt = Adam(model.named_parameters(), lr=cfg["train.lr"])
    start = 0
    if resume is not None:
        arrays, manifest = load_container(resume)
        load_params(model, arrays)
        opt.load_state_tensors({k: torch.as_tensor(v) for k, v in arrays.items() if k.startswith("adam/")})
        start = int(manifest["meta"]["step"])
    log_path = out / "log.jsonl"
    mode = "a" if resume is not None else "w"
    records = []
    with open(log_path, mode) as log:
        def emit(rec):
            records.append(rec)
            log.write(json.dumps(rec, sort_keys=True) + "\n")
            log.flush()
            if verbose:
                print(json.dumps(rec, sort_keys=True), flush=True)

        for step in range(start, cfg["train.steps"]):
            model.train()
            batch = sample_batch(dataset, train_ids, cfg, step)
            for group in opt.opt.param_groups:
                group["lr"] = learning_rate(cfg, step)
            opt.zero_grad()
            loss, stages = model_loss(model, batch)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at batch {step} (sequences/frames {batch.index.tolist()})")
            loss.backward()
            if cfg["train.grad_clip"] > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg["train.grad_clip"])
            opt.step()
            done = step + 1
            every = cfg["train.log_every"]
            if every and (step % every == 0 or done == cfg["train.steps"]):
                emit({"step": step, "loss": loss.item(), "stage_losses": [s.item() for s in stages],
                      "lr": learning_rate(cfg, step)})
            if cfg["train.eval_every"] and holdout and done % cfg["train.eval_every"] == 0:
                rep = eval_fn(model, holdout) if eval_fn else evaluate(model, dataset, holdout)
                emit({"step": done, "eval": {k: v for k, v in rep.items() if k != "per_frame"}})
            if cfg["train.checkpoint_every"] and done % cfg["train.checkpoint_every"] == 0:
                save_checkpoint(out / f"checkpoint_{done:06d}.tarc", model, opt, done)
    final = max(start, cfg["train.steps"])
    save_checkpoint(out / "checkpoint.tarc", model, opt, final)
    return TrainResult(model, final, records)
