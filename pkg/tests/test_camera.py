import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from tarmesh import camera as cam_mod
from tarmesh.camera import (BehindCameraError, CropContext, DegenerateScaleError, bbox_info, from_bbox_space,
                            project_full, project_to_bbox, recover_translation, to_bbox_space,
                            translation_to_cam)

F64 = torch.float64


def crop(cx=500.0, cy=500.0, s=200.0, f=1000.0):
    return CropContext.make([cx, cy], s, focal=f)


def test_centered_crop_translation():
    t = recover_translation(torch.tensor([1.0, 0.1, -0.2], dtype=F64), crop())
    # centered crop: no lateral correction; depth 2f / (s * s_bbox)
    assert torch.allclose(t, torch.tensor([0.1, -0.2, 10.0], dtype=F64))


def test_offset_crop_translation():
    t = recover_translation(torch.tensor([0.5, 0.0, 0.0], dtype=F64), crop(cx=700.0, cy=400.0))
    denom = 0.5 * 200.0
    assert torch.allclose(t, torch.tensor([2 * 200.0 / denom, 2 * -100.0 / denom, 2000.0 / denom], dtype=F64))


@settings(max_examples=200, deadline=None)
@given(st.floats(0.3, 3.0), st.floats(-0.5, 0.5), st.floats(-0.5, 0.5),
       st.floats(100, 900), st.floats(100, 900), st.floats(50, 600))
def test_translation_roundtrip(s, tx, ty, cx, cy, size):
    ctx = crop(cx, cy, size)
    c = torch.tensor([s, tx, ty], dtype=F64)
    assert torch.allclose(translation_to_cam(recover_translation(c, ctx), ctx), c, rtol=1e-10, atol=1e-10)


def test_projection_of_origin_hits_principal_point_offset():
    ctx = crop()
    p = project_full(torch.zeros(1, 3, dtype=F64), torch.tensor([0.0, 0.0, 5.0], dtype=F64), ctx)
    assert torch.allclose(p, torch.tensor([[500.0, 500.0]], dtype=F64))


def test_pinhole_formula():
    ctx = crop()
    pts = torch.tensor([[0.2, -0.1, 0.5]], dtype=F64)
    p = project_full(pts, torch.tensor([0.1, 0.0, 4.5], dtype=F64), ctx)
    assert torch.allclose(p, torch.tensor([[1000 * 0.3 / 5.0 + 500, 1000 * -0.1 / 5.0 + 500]], dtype=F64))


def test_bbox_space_roundtrip_and_corners():
    ctx = crop(600.0, 450.0, 300.0)
    j = torch.tensor([[600.0, 450.0], [750.0, 600.0]], dtype=F64)
    b = to_bbox_space(j, ctx)
    assert torch.allclose(b, torch.tensor([[0.0, 0.0], [0.5, 0.5]], dtype=F64))
    assert torch.allclose(from_bbox_space(b, ctx), j)


def test_bbox_info_vector():
    v = bbox_info(crop(700.0, 400.0, 250.0, 1000.0))
    assert torch.allclose(v, torch.tensor([0.2, -0.1, 0.25], dtype=F64))


def test_crop_camera_matches_weak_perspective_at_center():
    # a point at the body origin projects to the crop offset (t_x, t_y) * s / 2 in bbox space
    ctx = crop(550.0, 480.0, 200.0)
    c = torch.tensor([1.2, 0.05, -0.1], dtype=F64)
    b = project_to_bbox(torch.zeros(1, 3, dtype=F64), c, ctx)
    assert torch.allclose(b[0], c[0] * c[1:] / 2, atol=1e-12)


def test_degenerate_scale_and_behind_camera():
    with pytest.raises(DegenerateScaleError):
        recover_translation(torch.tensor([0.0, 0.0, 0.0], dtype=F64), crop())
    with pytest.raises(BehindCameraError, match="marker 1"):
        project_full(torch.tensor([[0.0, 0.0, 0.0], [0.0, 0.0, -6.0]], dtype=F64),
                     torch.tensor([0.0, 0.0, 5.0], dtype=F64), crop())


def test_lenient_mode_clamps():
    t = recover_translation(torch.tensor([-1.0, 0.0, 0.0], dtype=F64), crop(), strict=False)
    assert torch.isfinite(t).all() and t[2] > 0
    p = project_full(torch.tensor([[0.0, 0.0, -6.0]], dtype=F64), torch.tensor([0.0, 0.0, 5.0], dtype=F64),
                     crop(), strict=False)
    assert torch.isfinite(p).all()


def test_crop_context_array_roundtrip():
    arr = torch.tensor([[510.0, 490.0, 220.0, 1000.0, 1000.0, 1000.0]], dtype=F64)
    assert torch.equal(CropContext.from_array(arr).as_array(), arr)
    with pytest.raises(ValueError):
        CropContext.make([0.0, 0.0], -1.0)


def test_batched_projection_matches_rows():
    ctx = CropContext.make(torch.tensor([[500.0, 500.0], [620.0, 380.0]]), torch.tensor([200.0, 260.0]))
    c = torch.tensor([[1.0, 0.0, 0.1], [0.8, -0.1, 0.0]], dtype=F64)
    pts = torch.randn(2, 26, 3, dtype=F64) * 0.3
    both = project_to_bbox(pts, c, ctx)
    for i in range(2):
        one = project_to_bbox(pts[i], c[i], CropContext.from_array(ctx.as_array()[i]))
        assert torch.allclose(one, both[i])
    assert cam_mod.MIN_SCALE > 0 and np.isfinite(cam_mod.MIN_DEPTH)
