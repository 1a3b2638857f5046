"""MPJPE, PA-MPJPE, PVE and acceleration error, plus sliding-window inference.

Inputs are meters; outputs are millimeters. Functions accept arbitrary leading
batch dimensions and return one value per leading index.
"""
from __future__ import annotations

import numpy as np
import torch

from . import bodymodel as bm


def _check(pred, gt, name):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise ValueError(f"{name}: shape mismatch {pred.shape} vs {gt.shape}")
    return pred, gt


def mpjpe(pred, gt, root: int = 0):
    pred, gt = _check(pred, gt, "mpjpe")
    pred = pred - pred[..., root:root + 1, :]
    gt = gt - gt[..., root:root + 1, :]
    return np.linalg.norm(pred - gt, axis=-1).mean(-1) * 1000.0


def similarity_align(pred, gt):
    """Best s*R*pred + t fitting gt (least squares, proper rotations only)."""
    pred, gt = _check(pred, gt, "similarity_align")
    mu_p = pred.mean(-2, keepdims=True)
    mu_g = gt.mean(-2, keepdims=True)
    x = pred - mu_p
    y = gt - mu_g
    var = (x ** 2).sum((-1, -2))
    cov = np.swapaxes(y, -1, -2) @ x  # sum_i y_i x_i^T
    U, S, Vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(U @ Vt))
    d = np.where(d == 0, 1.0, d)
    D = np.ones(S.shape)
    D[..., -1] = d
    R = U @ (D[..., :, None] * Vt)
    degenerate = var < 1e-20
    scale = np.where(degenerate, 1.0, (S * D).sum(-1) / np.where(degenerate, 1.0, var))
    R = np.where(degenerate[..., None, None], np.eye(3), R)
    aligned = scale[..., None, None] * (x @ np.swapaxes(R, -1, -2)) + mu_g
    return aligned


def pa_mpjpe(pred, gt):
    pred, gt = _check(pred, gt, "pa_mpjpe")
    return np.linalg.norm(similarity_align(pred, gt) - gt, axis=-1).mean(-1) * 1000.0


def pve(pred_vertices, gt_vertices, pred_root=None, gt_root=None):
    pv, gv = _check(pred_vertices, gt_vertices, "pve")
    if pred_root is not None:
        pv = pv - np.asarray(pred_root, dtype=np.float64)[..., None, :]
        gv = gv - np.asarray(gt_root, dtype=np.float64)[..., None, :]
    return np.linalg.norm(pv - gv, axis=-1).mean(-1) * 1000.0


def accel_error(pred_seq, gt_seq):
    """Per-frame mean joint acceleration error for (N, J, 3) sequences -> (N-2,)."""
    pred, gt = _check(pred_seq, gt_seq, "accel_error")
    if pred.shape[0] < 3:
        raise ValueError(f"accel_error needs at least 3 frames, got {pred.shape[0]}")
    a_p = pred[2:] - 2 * pred[1:-1] + pred[:-2]
    a_g = gt[2:] - 2 * gt[1:-1] + gt[:-2]
    return np.linalg.norm(a_p - a_g, axis=-1).mean(-1) * 1000.0


def summarize(values) -> dict:
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    return {"mean": float(v.mean()) if v.size else float("nan"), "std": float(v.std()) if v.size else float("nan")}


@torch.no_grad()
def predict_sequence(model, seq, batch_size: int = 16, stages: bool = False):
    """Mid-frame inference over every frame of ``seq`` with edge-padded windows.

    Returns BodyParams arrays (T_total, ...) of the final estimate, or a list
    of them for every stage when ``stages`` is set.
    """
    from .datasynth import windows

    model.eval()
    T = model.cfg["data.frames"]
    dtype = model.dtype
    images = torch.as_tensor(seq.images)
    ctx = torch.as_tensor(seq.ctx, dtype=dtype)
    idx = [w for w, _ in windows(len(seq), T)]
    mids = [m for _, m in windows(len(seq), T)]
    collected = None
    for start in range(0, len(idx), batch_size):
        sel = idx[start:start + batch_size]
        mid = mids[start:start + batch_size]
        out = model(images[np.stack(sel)], ctx[mid])
        ests = out.estimates if stages else out.estimates[-1:]
        if collected is None:
            collected = [[] for _ in ests]
        for bucket, e in zip(collected, ests):
            bucket.append(e)
    result = [bm.BodyParams(*(torch.cat([getattr(e, f) for e in bucket]).double() for f in bm.BodyParams._fields))
              for bucket in collected]
    return result if stages else result[0]


def frame_metrics(body: bm.BodyModel, pred: bm.BodyParams, seq) -> dict:
    """Per-frame metric arrays for one sequence of predictions."""
    bt = body.tensors(torch.float64)
    with torch.no_grad():
        po = bm.body_forward(bt, torch.as_tensor(pred.theta, dtype=torch.float64),
                             torch.as_tensor(pred.beta, dtype=torch.float64))
        go = bm.body_forward(bt, torch.as_tensor(seq.theta), torch.as_tensor(seq.beta))
    pj, gj = po.joints.numpy(), go.joints.numpy()
    return {
        "mpjpe": mpjpe(pj, gj),
        "pa_mpjpe": pa_mpjpe(pj, gj),
        "pve": pve(po.vertices.numpy(), go.vertices.numpy(), pj[:, 0], gj[:, 0]),
        "accel": accel_error(pj, gj),
    }


def frame_metrics_mpjpe(body: bm.BodyModel, pred: bm.BodyParams, seq):
    """Per-frame MPJPE only, for stage-by-stage tracking."""
    bt = body.tensors(torch.float64)
    with torch.no_grad():
        pj = bm.body_forward(bt, torch.as_tensor(pred.theta, dtype=torch.float64),
                             torch.as_tensor(pred.beta, dtype=torch.float64)).joints.numpy()
    return mpjpe(pj, seq.joints)


def metric_report(per_seq: list) -> dict:
    """Aggregate per-sequence frame metrics into the report layout."""
    cat = {k: np.concatenate([m[k] for m in per_seq]) for k in ("mpjpe", "pa_mpjpe", "pve", "accel")}
    return {
        "mpjpe_mm": summarize(cat["mpjpe"]),
        "pa_mpjpe_mm": summarize(cat["pa_mpjpe"]),
        "pve_mm": summarize(cat["pve"]),
        "accel_mm_per_frame2": summarize(cat["accel"]),
        "frames": int(cat["mpjpe"].size),
    }


def evaluate(model, dataset, seq_indices, stages: bool = True) -> dict:
    """Metric report for the model over the listed sequences, plus per-stage MPJPE."""
    per_seq, stage_mpjpe = [], None
    for i in seq_indices:
        seq = dataset.sequences[i]
        preds = predict_sequence(model, seq, stages=True)
        per_seq.append(frame_metrics(dataset.model, preds[-1], seq))
        if stages:
            vals = [frame_metrics_mpjpe(dataset.model, p, seq) for p in preds]
            stage_mpjpe = vals if stage_mpjpe is None else [np.concatenate([a, b]) for a, b in zip(stage_mpjpe, vals)]
    report = metric_report(per_seq)
    if stages:
        report["stage_mpjpe_mm"] = [float(v.mean()) for v in stage_mpjpe]
    report["per_frame"] = per_seq
    return report

