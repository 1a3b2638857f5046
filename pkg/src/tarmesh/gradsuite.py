"""Finite-difference gradient suites over primitives, encoders and the full pipeline.

Everything runs in float64 on small randomized shapes. Each item builds a
scalar loss closure plus the tensors to probe; the loss contracts the output
with a fixed random tensor so that every output entry carries a distinct
weight. Differences are taken on kink-free stencils (see ``grad_check``), so
relu, clamp and bilinear-cell boundaries near the probe point are stepped
around rather than measured across.
"""
from __future__ import annotations

import time
from typing import Callable, NamedTuple

import torch

from . import bodymodel as bm
from .camera import CropContext, bbox_info, project_to_bbox
from .config import make_config
from .diffcore import grad_check, ops
from .encoders import ConvGRUCell, GlobalTemporalEncoder, InitialRegressor, LocalTemporalEncoder
from .features import Backbone
from .layers import GroupedGRU
from .refine import RecurrentRefiner

SCOPES = ("ops", "encoders", "end2end")
TOLERANCE = {"ops": 1e-5, "encoders": 1e-5, "end2end": 1e-4}
EPS_LADDER = (1e-4, 1e-5, 1e-6)
DTYPE = torch.float64


class GradItem(NamedTuple):
    name: str
    build: Callable  # generator -> (loss closure, {name: tensor})
    max_entries: int | None = None


class GradResult(NamedTuple):
    name: str
    max_rel_error: float
    tolerance: float
    seconds: float
    checked: int = 0
    skipped: int = 0

    @property
    def passed(self) -> bool:
        # a check whose every entry sat on a kink measured nothing
        return self.checked > 0 and self.max_rel_error <= self.tolerance


def _rand(g, *shape, scale=1.0):
    return (torch.randn(*shape, generator=g, dtype=DTYPE) * scale).requires_grad_()


def _contract(out: torch.Tensor, g: torch.Generator):
    w = torch.randn(out.shape, generator=g, dtype=DTYPE)
    return lambda y: (y * w).sum()


def _op_item(name, make_inputs, fn):
    def build(g):
        inputs = make_inputs(g)
        with torch.no_grad():
            ref = fn(*inputs.values())
        red = _contract(ref, g)
        return (lambda: red(fn(*inputs.values()))), inputs
    return GradItem(name, build)


def _away_from_kink(g, *shape, margin=1e-2):
    x = torch.randn(*shape, generator=g, dtype=DTYPE)
    x = torch.where(x.abs() < margin, x.sign() * margin + x, x)
    x = torch.where(x == 0, torch.full_like(x, margin), x)
    return x.requires_grad_()


def _fractional_coords(g, b, n, h, w):
    # stay inside the map and at least 0.05 away from grid lines, where bilinear interpolation kinks
    frac = 0.05 + 0.9 * torch.rand(b, n, 2, generator=g, dtype=DTYPE)
    cell = torch.stack([torch.randint(0, w - 1, (b, n), generator=g),
                        torch.randint(0, h - 1, (b, n), generator=g)], -1).to(DTYPE)
    return (cell + frac).requires_grad_()


def ops_items() -> list[GradItem]:
    def two(shape):
        return lambda g: {"a": _rand(g, *shape), "b": _rand(g, *shape)}

    return [
        _op_item("matmul", lambda g: {"a": _rand(g, 2, 3, 4), "b": _rand(g, 4, 5)}, ops.matmul),
        _op_item("conv2d", lambda g: {"x": _rand(g, 2, 3, 6, 5), "w": _rand(g, 4, 3, 3, 3), "b": _rand(g, 4)},
                 lambda x, w, b: ops.conv2d(x, w, b, stride=2, padding=1)),
        _op_item("conv_transpose2d",
                 lambda g: {"x": _rand(g, 2, 3, 4, 3), "w": _rand(g, 3, 2, 4, 4), "b": _rand(g, 2)},
                 lambda x, w, b: ops.conv_transpose2d(x, w, b, stride=2, padding=1)),
        _op_item("conv1d_temporal", lambda g: {"x": _rand(g, 2, 7, 3), "k": _rand(g, 3)},
                 lambda x, k: ops.conv1d_temporal(x, k, padding=1)),
        _op_item("add", two((3, 4)), ops.add),
        _op_item("sub", two((3, 4)), ops.sub),
        _op_item("mul", two((3, 4)), ops.mul),
        _op_item("sigmoid", lambda g: {"x": _rand(g, 3, 5, scale=2.0)}, ops.sigmoid),
        _op_item("tanh", lambda g: {"x": _rand(g, 3, 5, scale=2.0)}, ops.tanh),
        _op_item("relu", lambda g: {"x": _away_from_kink(g, 4, 5)}, ops.relu),
        _op_item("softmax", lambda g: {"x": _rand(g, 3, 6)}, lambda x: ops.softmax(x, dim=0)),
        _op_item("layer_norm", lambda g: {"x": _rand(g, 3, 6), "w": _rand(g, 6), "b": _rand(g, 6)},
                 ops.layer_norm),
        _op_item("mean", lambda g: {"x": _rand(g, 3, 4, 5)}, lambda x: ops.mean(x, dim=1)),
        _op_item("sum", lambda g: {"x": _rand(g, 3, 4, 5)}, lambda x: ops.sum(x, dim=(0, 2))),
        _op_item("concat", lambda g: {"a": _rand(g, 2, 3), "b": _rand(g, 2, 5)},
                 lambda a, b: ops.concat([a, b], dim=1)),
        _op_item("slice", lambda g: {"x": _rand(g, 4, 6)}, lambda x: ops.slice_(x, 1, 1, 4)),
        _op_item("reshape", lambda g: {"x": _rand(g, 4, 6)}, lambda x: ops.reshape(x, (3, 8))),
        _op_item("transpose", lambda g: {"x": _rand(g, 2, 4, 6)}, lambda x: ops.transpose(x, 0, 2)),
        _op_item("bilinear_sample",
                 lambda g: {"fmap": _rand(g, 2, 3, 5, 6), "coords": _fractional_coords(g, 2, 7, 5, 6)},
                 ops.bilinear_sample),
    ]


def tiny_body(seed: int = 0) -> bm.BodyModel:
    return bm.make_synthetic_model(bm.SyntheticBodyConfig(n_vertices=120), seed=seed)


def tiny_crop(batch: int) -> CropContext:
    center = torch.tensor([[480.0, 510.0], [530.0, 470.0]], dtype=DTYPE)[:batch]
    size = torch.tensor([300.0, 340.0], dtype=DTYPE)[:batch]
    return CropContext.make(center, size, dtype=DTYPE)


def _module_item(name, make, inputs_fn, call=None, max_entries=6):
    """Probe every parameter of the module built by ``make`` plus the float inputs."""
    def build(g):
        torch.manual_seed(int(torch.randint(0, 2 ** 31 - 1, (1,), generator=g)))
        mod = make().to(DTYPE)
        inputs = inputs_fn(g)
        run = call or (lambda m, *xs: m(*xs))
        with torch.no_grad():
            ref = run(mod, *inputs.values())
        red = _contract(ref, g)
        params = dict(inputs)
        params.update({f"{name}.{n}": p for n, p in mod.named_parameters()})
        return (lambda: red(run(mod, *inputs.values()))), params
    return GradItem(name, build, max_entries)


def _lte_inputs(g):
    return {"M": _rand(g, 2, 5, 3, 8, 8, scale=0.5)}


def encoders_items() -> list[GradItem]:
    body = tiny_body()

    def body_fn(_, theta, beta):
        out = bm.body_forward(body.tensors(DTYPE), theta, beta)
        return torch.cat([out.vertices.flatten(1), out.joints.flatten(1), out.markers.flatten(1)], 1)

    def project_fn(_, points, cam):
        return project_to_bbox(points, cam, tiny_crop(2))

    def refiner_fn(mod, bank, theta, beta, cam, m):
        crop = tiny_crop(2)
        ests, _ = mod(bank, bm.BodyParams(theta, beta, cam), m, crop, bbox_info(crop), body.tensors(DTYPE))
        return torch.cat([e.flat() for e in ests], -1)

    cam_in = lambda g: torch.tensor([[0.9, 0.02, -0.03], [1.1, -0.05, 0.04]], dtype=DTYPE).requires_grad_()
    return [
        _module_item("convgru_cell", lambda: ConvGRUCell(3),
                     lambda g: {"m": _rand(g, 2, 3, 5, 5), "h": _rand(g, 2, 3, 5, 5, scale=0.5)}),
        _module_item("convgru_cell_literal", lambda: ConvGRUCell(3, paper_literal_eq2=True),
                     lambda g: {"m": _rand(g, 2, 3, 5, 5), "h": _rand(g, 2, 3, 5, 5, scale=0.5)}),
        _module_item("lte_full", lambda: LocalTemporalEncoder(3, 3, feature_size=8), _lte_inputs),
        _module_item("lte_downsampled",
                     lambda: LocalTemporalEncoder(3, 5, variant="downsampled", downsample_size=4, feature_size=8),
                     _lte_inputs),
        _module_item("gte", lambda: GlobalTemporalEncoder(5, 6, 8, layers=2, heads=2, mlp_dim=12),
                     lambda g: {"F": _rand(g, 2, 5, 6)}),
        _module_item("initial_regressor", lambda: InitialRegressor(8, 6, 7, head_init="default"),
                     lambda g: {"f": _rand(g, 2, 8), "cliff": _rand(g, 2, 3, scale=0.3)},
                     call=lambda m, f, c: m(f, c)[0].flat()),
        _module_item("grouped_gru", lambda: GroupedGRU(4, 5, 6),
                     lambda g: {"x": _rand(g, 2, 4, 5), "h": _rand(g, 2, 4, 6, scale=0.5)}),
        _module_item("backbone", lambda: Backbone(16, 4, 6, 3),
                     lambda g: {"images": _rand(g, 1, 2, 3, 16, 16)},
                     call=lambda m, x: torch.cat([t.flatten() for t in m(x)])),
        _module_item("body_forward", lambda: torch.nn.Identity(),
                     lambda g: {"theta": _rand(g, 2, 24, 3, scale=0.3), "beta": _rand(g, 2, 10)},
                     call=body_fn, max_entries=12),
        _module_item("camera_projection", lambda: torch.nn.Identity(),
                     lambda g: {"points": _rand(g, 2, 26, 3, scale=0.4), "cam": cam_in(g)}, call=project_fn),
        _module_item("refiner", lambda: RecurrentRefiner(4, radius=1, patch_dim=3, hidden=6, iterations=2,
                                                        head_init="default"),
                     lambda g: {"bank": _rand(g, 2, 26, 6, scale=0.5), "theta": _rand(g, 2, 24, 3, scale=0.2),
                                "beta": _rand(g, 2, 10, scale=0.5), "cam": cam_in(g),
                                "m": _rand(g, 2, 4, 8, 8)},
                     call=refiner_fn, max_entries=4),
    ]


def end2end_config() -> dict:
    return make_config({
        "data.frames": 5, "data.resolution": 32, "lte.window": 5,
        "features.width": 4, "features.global_dim": 8, "features.local_dim": 4,
        "gte.model_dim": 8, "gte.heads": 2, "gte.mlp_dim": 12, "gte.layers": 2,
        "regressor.state_dim": 6, "regressor.hidden_dim": 6, "regressor.head_init": "default",
        "rrm.hidden_dim": 6, "rrm.patch_dim": 3,
    })


def end2end_items() -> list[GradItem]:
    from .model import TemporalRefiningNetwork
    from .train import Batch, Targets, model_loss

    def build(g):
        torch.manual_seed(int(torch.randint(0, 2 ** 31 - 1, (1,), generator=g)))
        cfg = end2end_config()
        body = tiny_body()
        model = TemporalRefiningNetwork(cfg, body).to(DTYPE)
        crop = tiny_crop(2)
        with torch.no_grad():
            theta = torch.randn(2, 24, 3, generator=g, dtype=DTYPE) * 0.2
            beta = torch.randn(2, 10, generator=g, dtype=DTYPE)
            cam = torch.tensor([[1.0, 0.05, 0.0], [0.9, 0.0, -0.05]], dtype=DTYPE)
            out = bm.body_forward(body.tensors(DTYPE), theta, beta)
            kp = project_to_bbox(out.markers, cam, crop)
        images = torch.rand(2, 5, 3, 32, 32, generator=g, dtype=DTYPE)
        batch = Batch(images, crop.as_array(), Targets(theta, beta, out.joints, kp), None)
        params = {n: p for n, p in model.named_parameters()}
        return (lambda: model_loss(model, batch)[0]), params

    return [GradItem("end2end_total_loss", build, max_entries=2)]


def items_for(scope: str) -> list[GradItem]:
    if scope == "ops":
        return ops_items()
    if scope == "encoders":
        return encoders_items()
    if scope == "end2end":
        return end2end_items()
    raise ValueError(f"unknown gradcheck scope {scope!r}; expected one of {SCOPES}")


def run_items(items, tolerance: float, seed: int = 0, eps_ladder=EPS_LADDER, rel_floor: float = 1e-3,
              report: Callable | None = None) -> list[GradResult]:
    results = []
    for k, item in enumerate(items):
        g = torch.Generator().manual_seed(seed * 1000 + k)
        t0 = time.perf_counter()
        f, params = item.build(g)
        errs = grad_check(f, params, eps_ladder=eps_ladder, rel_floor=rel_floor, max_entries=item.max_entries,
                          generator=g)
        res = GradResult(item.name, max(errs.values()), tolerance, time.perf_counter() - t0,
                         sum(errs.checked.values()), sum(errs.skipped.values()))
        results.append(res)
        if report is not None:
            report(res)
    return results


def run_scope(scope: str, seed: int = 0, report: Callable | None = None) -> list[GradResult]:
    return run_items(items_for(scope), TOLERANCE[scope], seed=seed, report=report)
