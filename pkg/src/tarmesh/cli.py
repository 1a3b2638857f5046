"""Command line: gen, train, eval, gradcheck, export.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np
import torch

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _sig9(x):
    return [_sig9(v) for v in x] if isinstance(x, (list, tuple)) else float(f"{float(x):.9g}")


def cmd_gen(args) -> int:
    from .datasynth import MotionConfig, generate_dataset

    motion = MotionConfig(frames=args.frames, resolution=args.resolution)
    ds = generate_dataset(args.seqs, args.frames, args.seed, motion=motion)
    ds.save(args.out)
    print(f"wrote {args.seqs} sequences x {args.frames} frames to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .config import load_config
    from .datasynth import Dataset
    from .train import train_run

    cfg = load_config(args.config)
    ds = Dataset.load(args.dataset)
    res = train_run(ds, cfg, args.out, resume=args.resume, verbose=not args.quiet)
    print(f"finished at step {res.step}; checkpoint in {Path(args.out) / 'checkpoint.tarc'}")
    return EXIT_OK


def _eval_split(cfg: dict, n: int, split: str) -> list:
    h = cfg["data.holdout_seqs"]
    if split == "auto":
        split = "holdout" if h else "all"
    if split == "all":
        return list(range(n))
    if split == "train":
        return list(range(n - h))
    if not h:
        raise ValueError("checkpoint config has no holdout split (data.holdout_seqs = 0)")
    return list(range(n - h, n))


def _write_frame_csv(path, seq_ids, per_seq) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seq", "frame", "mpjpe_mm", "pa_mpjpe_mm", "pve_mm", "accel_mm_per_frame2"])
        for s, m in zip(seq_ids, per_seq):
            for t in range(len(m["mpjpe"])):
                acc = m["accel"][t - 1] if 0 < t < len(m["mpjpe"]) - 1 else ""
                w.writerow([s, t] + [f"{m[k][t]:.6f}" for k in ("mpjpe", "pa_mpjpe", "pve")]
                           + [acc if acc == "" else f"{acc:.6f}"])


def cmd_eval(args) -> int:
    from .datasynth import Dataset
    from .evaluation import evaluate
    from .train import load_checkpoint

    override = {"model.ablate": args.ablate} if args.ablate else None
    model, _, meta = load_checkpoint(args.checkpoint, override)
    ds = Dataset.load(args.dataset)
    if ds.model.n_vertices != model.body.n_vertices:
        raise ValueError(f"dataset body has {ds.model.n_vertices} vertices, checkpoint body "
                         f"{model.body.n_vertices}")
    seq_ids = _eval_split(model.cfg, len(ds.sequences), args.split)
    rep = evaluate(model, ds, seq_ids)
    per_seq = rep.pop("per_frame")
    rep.update({"checkpoint_step": meta["step"], "ablate": model.cfg["model.ablate"], "sequences": seq_ids})
    Path(args.report).write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
    if args.per_frame_csv:
        _write_frame_csv(args.per_frame_csv, seq_ids, per_seq)
    print(json.dumps({k: rep[k] for k in ("mpjpe_mm", "pa_mpjpe_mm", "pve_mm", "accel_mm_per_frame2")}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import SCOPES, run_scope

    scopes = SCOPES if args.scope == "all" else (args.scope,)
    failed = 0
    print(f"{'item':28s} {'max rel err':>12s} {'tol':>8s} {'checked':>8s} {'skipped':>8s}  status")
    for scope in scopes:
        def report(r):
            print(f"{scope + '/' + r.name:28s} {r.max_rel_error:12.3e} {r.tolerance:8.0e} {r.checked:8d} "
                  f"{r.skipped:8d}  {'pass' if r.passed else 'FAIL'}", flush=True)
        failed += sum(not r.passed for r in run_scope(scope, seed=args.seed, report=report))
    print(f"{failed} failure(s)")
    return EXIT_OK if failed == 0 else EXIT_RUNTIME


def write_obj(path, vertices: np.ndarray, faces: np.ndarray) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in faces]
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_export(args) -> int:
    from . import bodymodel as bm
    from .datasynth import Dataset
    from .evaluation import frame_metrics, predict_sequence

    ds = Dataset.load(args.dataset)
    if not 0 <= args.seq < len(ds.sequences):
        raise IndexError(f"sequence {args.seq} out of range [0, {len(ds.sequences)})")
    seq = ds.sequences[args.seq]
    if not 0 <= args.frame < len(seq):
        raise IndexError(f"frame {args.frame} out of range [0, {len(seq)})")
    if args.source == "gt":
        params = bm.BodyParams(*(torch.as_tensor(getattr(seq, f)) for f in ("theta", "beta", "cam")))
        body = ds.model
    else:
        if args.checkpoint is None:
            raise UsageError("--checkpoint is required unless --source gt")
        from .train import load_checkpoint
        model, _, _ = load_checkpoint(args.checkpoint)
        params = predict_sequence(model, seq)
        body = model.body
    metrics = frame_metrics(body, params, seq)
    t = args.frame
    one = bm.BodyParams(*(p[t:t + 1].double() for p in params))
    with torch.no_grad():
        out = bm.body_forward(body.tensors(torch.float64), one.theta, one.beta)
    write_obj(args.out, out.vertices[0].numpy(), body.faces)
    acc = metrics["accel"][t - 1] if 0 < t < len(seq) - 1 else None
    sidecar = {
        "sequence": args.seq,
        "frame": t,
        "source": args.source,
        "n_vertices": int(out.vertices.shape[1]),
        "phi": {k: _sig9(getattr(one, k)[0].reshape(-1).tolist()) for k in ("theta", "beta", "cam")},
        "metrics": {
            "mpjpe_mm": _sig9(metrics["mpjpe"][t]),
            "pa_mpjpe_mm": _sig9(metrics["pa_mpjpe"][t]),
            "pve_mm": _sig9(metrics["pve"][t]),
            "accel_mm_per_frame2": None if acc is None else _sig9(acc),
        },
    }
    side = Path(args.out).with_suffix(".json")
    side.write_text(json.dumps(sidecar, indent=2) + "\n")
    print(f"wrote {args.out} and {side}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tarmesh", description="Temporal-aware refining network for video mesh recovery")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--out", required=True, help="dataset file to write")
    g.add_argument("--seqs", type=int, default=8, help="number of sequences")
    g.add_argument("--frames", type=int, default=30, help="frames per sequence")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--resolution", type=int, default=64, help="rendered crop size in pixels")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="JSON config with full-path keys; defaults if omitted")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True, help="output directory for log.jsonl and checkpoints")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--quiet", action="store_true", help="do not echo log lines")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--report", required=True, help="metric report JSON to write")
    e.add_argument("--ablate", choices=("none", "only-gte", "only-lte"),
                   help="drop an encoder at inference (overrides the checkpoint config)")
    e.add_argument("--split", choices=("auto", "all", "train", "holdout"), default="auto",
                   help="sequences to evaluate; auto uses the holdout when the config defines one")
    e.add_argument("--per-frame-csv", help="optional per-frame metric table")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suites (float64)")
    c.add_argument("--scope", required=True, choices=("ops", "encoders", "end2end", "all"))
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)

    x = sub.add_parser("export", help="write one frame's mesh as OBJ plus a JSON sidecar")
    x.add_argument("--checkpoint", help="model checkpoint (not needed with --source gt)")
    x.add_argument("--dataset", required=True)
    x.add_argument("--seq", type=int, default=0, help="sequence index")
    x.add_argument("--frame", type=int, required=True)
    x.add_argument("--out", required=True, help="OBJ path; the sidecar goes next to it as .json")
    x.add_argument("--source", choices=("pred", "gt"), default="pred")
    x.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # surfaced to the shell as a runtime failure
        print(f"tarmesh: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
