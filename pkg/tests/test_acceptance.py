"""Acceptance criteria, one test each, every one printing a PASS/FAIL line.

The training criteria (5-7) run real CPU training and take roughly an hour
together; select them with ``-m acceptance`` or skip them with
``-m "not acceptance"``.
"""
import json
import time

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from tarmesh import bodymodel as bm
from tarmesh import cli
from tarmesh.config import make_config
from tarmesh.encoders import LocalTemporalEncoder
from tarmesh.evaluation import accel_error, evaluate, mpjpe, pa_mpjpe
from tarmesh.datasynth import generate_dataset
from tarmesh.gradsuite import SCOPES, TOLERANCE, run_scope
from tarmesh.model import TemporalRefiningNetwork
from tarmesh.refine import patch_offsets
from tarmesh.train import stage_weights, total_loss, train_run

from .oracles import body_loop, similarity_search
from .test_encoders import hand_unrolled
from .test_evaluation import joints, similarity

pytestmark = pytest.mark.acceptance

OVERFIT_STEPS = 2000
PLUS_STEPS = 4000
PLUS_TRAIN_SEQS = 32
PLUS_HOLDOUT_SEQS = 8


@pytest.mark.criterion(1, "gradient suite")
def test_gradient_suite(criterion):
    t0 = time.perf_counter()
    worst, failed = {}, []
    for scope in SCOPES:
        for r in run_scope(scope):
            worst[scope] = max(worst.get(scope, 0.0), r.max_rel_error)
            if not r.passed:
                failed.append(f"{scope}/{r.name}={r.max_rel_error:.2e}")
    secs = time.perf_counter() - t0
    detail = ", ".join(f"{s} max {worst[s]:.2e} (tol {TOLERANCE[s]:.0e})" for s in SCOPES)
    detail += f"; {secs:.0f} s (limit 600 s)"
    if failed:
        detail += "; failing: " + ", ".join(failed)
    criterion(not failed and secs < 600, detail)


@pytest.mark.criterion(2, "oracle equivalence")
def test_oracle_equivalence(criterion, body):
    torch.manual_seed(0)
    lte = LocalTemporalEncoder(4, 5, feature_size=8)
    M = torch.randn(2, 9, 4, 8, 8)
    with torch.no_grad():
        lte_err = (lte(M) - hand_unrolled(lte, M)).abs().max().item()

    rng = np.random.default_rng(7)
    bt = body.tensors(torch.float64)
    lbs_err = 0.0
    for _ in range(100):
        theta = rng.normal(size=(24, 3)) * 0.5
        beta = rng.uniform(-2, 2, size=10)
        out = bm.body_forward(bt, torch.as_tensor(theta), torch.as_tensor(beta))
        verts, jts = body_loop(body, theta, beta)
        lbs_err = max(lbs_err, np.abs(out.vertices.numpy() - verts).max(), np.abs(out.joints.numpy() - jts).max())

    rng = np.random.default_rng(4)
    pa_ok, pa_gap = True, 0.0
    for _ in range(50):
        g = joints(rng, 14)
        s, R, t = similarity(rng)
        p = (s * g @ R.T + t) + rng.normal(size=g.shape) * 0.05
        oracle, step = similarity_search(p, g, rng)
        # the search's final rotation step bounds how far its optimum can be from the true one
        res = 1000.0 * step * np.linalg.norm(g - g.mean(0), axis=1).max() + 1e-6
        ours = pa_mpjpe(p, g)
        pa_ok &= bool(ours <= oracle + res and oracle - ours <= res)
        pa_gap = max(pa_gap, abs(oracle - ours) / res)

    ok = lte_err <= 1e-5 and lbs_err <= 1e-6 and pa_ok
    criterion(ok, f"LTE {lte_err:.1e} (tol 1e-5); LBS {lbs_err:.1e} over 100 draws (tol 1e-6); "
                  f"pa_mpjpe within oracle resolution on 50 sets (worst gap {pa_gap:.2f} of resolution)")


@pytest.mark.criterion(3, "loss schedule")
def test_loss_schedule(criterion):
    cfg = make_config()
    expected = [np.float64(0.85) ** k for k in range(5, -1, -1)]
    weights = stage_weights(cfg["loss.gamma"], cfg["rrm.iterations"])
    # weights as the loss actually applies them: a one-hot stage vector picks out each one
    applied = []
    for i in range(6):
        onehot = [torch.tensor(float(i == j), dtype=torch.float64) for j in range(6)]
        applied.append(total_loss(onehot, cfg).item())
    ok = (all(np.float64(w).tobytes() == e.tobytes() for w, e in zip(weights, expected))
          and all(np.float64(a).tobytes() == e.tobytes() for a, e in zip(applied, expected)))
    criterion(ok, "weights " + ", ".join(f"{w!r}" for w in applied))


@pytest.mark.criterion(4, "constants conformance")
def test_constants(criterion, tiny_body):
    cfg = make_config()
    model = TemporalRefiningNetwork(cfg, tiny_body)
    images = torch.rand(1, cfg["data.frames"], 3, cfg["data.resolution"], cfg["data.resolution"])
    ctx = torch.tensor([[320.0, 240.0, 200.0, 1000.0, 640.0, 480.0]])
    with torch.no_grad():
        out = model(images, ctx)
    found = {
        "T": cfg["data.frames"],
        "L": model.lte.window,
        "gte_layers": len(model.gte.encoder.layers),
        "states": out.bank.shape[1],
        "grus": model.refiner.gru.inp.weight.shape[0],
        "r": model.refiner.radius,
        "window_cells": patch_offsets(model.refiner.radius).shape[0],
        "iterations": len(out.estimates) - 1,
    }
    want = {"T": 9, "L": 5, "gte_layers": 4, "states": 26, "grus": 26, "r": 3, "window_cells": 49, "iterations": 5}
    criterion(found == want, json.dumps(found))


@pytest.fixture(scope="module")
def overfit_run(tmp_path_factory):
    data = generate_dataset(8, 30, seed=0)
    cfg = make_config({"train.steps": OVERFIT_STEPS, "train.log_every": 250})
    t0 = time.perf_counter()
    res = train_run(data, cfg, tmp_path_factory.mktemp("overfit"))
    rep = evaluate(res.model, data, range(len(data.sequences)))
    return rep, time.perf_counter() - t0


@pytest.mark.criterion(5, "overfit")
def test_overfit(criterion, overfit_run):
    rep, secs = overfit_run
    m, v = rep["mpjpe_mm"]["mean"], rep["pve_mm"]["mean"]
    criterion(m < 15 and v < 20 and secs < 1800,
              f"MPJPE {m:.2f} mm (< 15), PVE {v:.2f} mm (< 20), {secs:.0f} s incl. eval (< 1800)")


@pytest.fixture(scope="module")
def plus_data():
    return generate_dataset(PLUS_TRAIN_SEQS + PLUS_HOLDOUT_SEQS, 30, seed=1)


def plus_report(data, ablate, out_dir):
    cfg = make_config({"train.steps": PLUS_STEPS, "train.log_every": 500,
                       "data.holdout_seqs": PLUS_HOLDOUT_SEQS, "model.ablate": ablate})
    res = train_run(data, cfg, out_dir)
    n = len(data.sequences)
    return evaluate(res.model, data, range(n - PLUS_HOLDOUT_SEQS, n))


@pytest.fixture(scope="module")
def plus_runs(plus_data, tmp_path_factory):
    return {}


def plus(plus_runs, plus_data, tmp_path_factory, ablate):
    if ablate not in plus_runs:
        plus_runs[ablate] = plus_report(plus_data, ablate, tmp_path_factory.mktemp(f"plus_{ablate}"))
    return plus_runs[ablate]


@pytest.mark.criterion(6, "refinement efficacy")
def test_refinement_efficacy(criterion, plus_runs, plus_data, tmp_path_factory):
    stages = plus(plus_runs, plus_data, tmp_path_factory, "none")["stage_mpjpe_mm"]
    criterion(stages[-1] < stages[0],
              "holdout MPJPE by stage " + ", ".join(f"{s:.1f}" for s in stages) + " mm")


@pytest.mark.criterion(7, "temporal encoders")
def test_temporal_encoder_trend(criterion, plus_runs, plus_data, tmp_path_factory):
    acc = {a: plus(plus_runs, plus_data, tmp_path_factory, a)["accel_mm_per_frame2"]["mean"]
           for a in ("none", "only-gte", "only-lte")}
    criterion(acc["none"] < acc["only-gte"] and acc["none"] < acc["only-lte"],
              "holdout ACCEL full {none:.2f}, only-gte {only-gte:.2f}, only-lte {only-lte:.2f} mm/frame^2".format(**acc))


seeds = st.integers(0, 2 ** 32 - 1)


@pytest.mark.criterion(8, "metric properties")
def test_metric_properties(criterion):
    worst = {"pa": 0.0, "accel": 0.0, "mpjpe": 0.0}

    @settings(max_examples=1000, deadline=None, database=None)
    @given(seeds)
    def pa_invariant(seed):
        rng = np.random.default_rng(seed)
        g, p = joints(rng), joints(rng)
        s, R, t = similarity(rng)
        d = abs(pa_mpjpe(s * p @ R.T + t, g) - pa_mpjpe(p, g))
        worst["pa"] = max(worst["pa"], d)
        assert d <= 1e-6

    @settings(max_examples=1000, deadline=None, database=None)
    @given(seeds)
    def accel_constant_velocity(seed):
        rng = np.random.default_rng(seed)
        t = np.arange(int(rng.integers(3, 30)))[:, None, None]
        p = rng.normal(size=(1, 24, 3)) + rng.normal(size=(1, 24, 3)) * t
        g = rng.normal(size=(1, 24, 3)) + rng.normal(size=(1, 24, 3)) * t
        d = np.abs(accel_error(p, g)).max()
        worst["accel"] = max(worst["accel"], d)
        assert d <= 1e-9

    @settings(max_examples=1000, deadline=None, database=None)
    @given(seeds)
    def mpjpe_translation(seed):
        rng = np.random.default_rng(seed)
        g, p = joints(rng), joints(rng)
        d = abs(mpjpe(p + rng.normal(size=3) * 10, g) - mpjpe(p, g))
        worst["mpjpe"] = max(worst["mpjpe"], d)
        assert d <= 1e-9

    failures = []
    for prop in (pa_invariant, accel_constant_velocity, mpjpe_translation):
        try:
            prop()
        except AssertionError as exc:
            failures.append(f"{prop.__name__}: {exc}")
    detail = (f"1000 instances each; worst pa_mpjpe change {worst['pa']:.1e} mm (tol 1e-6), "
              f"accel {worst['accel']:.1e}, mpjpe change {worst['mpjpe']:.1e}")
    criterion(not failures, detail + ("; " + "; ".join(failures) if failures else ""))


@pytest.mark.criterion(9, "determinism")
def test_determinism(criterion, tmp_path):
    cfg = {"data.frames": 5, "data.resolution": 32, "lte.window": 3, "features.width": 4,
           "features.global_dim": 16, "features.local_dim": 4, "gte.model_dim": 16, "gte.heads": 2,
           "gte.mlp_dim": 16, "gte.layers": 1, "regressor.state_dim": 8, "regressor.hidden_dim": 8,
           "rrm.hidden_dim": 8, "train.batch_size": 2, "train.steps": 12, "train.log_every": 1,
           "train.checkpoint_every": 6, "data.holdout_seqs": 1, "train.eval_every": 6}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    files = {}
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        assert cli.main(["gen", "--out", str(d / "data.tarc"), "--seqs", "3", "--frames", "10",
                         "--seed", "11", "--resolution", "32"]) == 0
        assert cli.main(["train", "--config", str(tmp_path / "cfg.json"), "--dataset", str(d / "data.tarc"),
                         "--out", str(d / "run"), "--quiet"]) == 0
        files[run] = {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}
    same = files["a"].keys() == files["b"].keys() and all(files["a"][k] == files["b"][k] for k in files["a"])
    diff = [k for k in files["a"] if files["a"][k] != files["b"].get(k)]
    criterion(same, f"{len(files['a'])} artifacts compared byte-for-byte ({', '.join(sorted(files['a']))})"
                    + (f"; differing: {diff}" if diff else ""))
