import json

import numpy as np
import pytest

from tarmesh import cli
from tarmesh.config import DEFAULTS, ConfigError, load_config, make_config
from tarmesh.datasynth import Dataset
from tarmesh.diffcore import read_manifest

TINY = {
    "data.frames": 5, "data.resolution": 32, "lte.window": 3, "features.width": 4,
    "features.global_dim": 16, "features.local_dim": 4, "gte.model_dim": 16, "gte.heads": 2,
    "gte.mlp_dim": 16, "gte.layers": 1, "regressor.state_dim": 8, "regressor.hidden_dim": 8,
    "rrm.hidden_dim": 8, "train.batch_size": 2, "train.steps": 2, "train.log_every": 1,
    "data.holdout_seqs": 1,
}


def test_defaults_are_reference_constants():
    cfg = make_config()
    assert cfg["data.frames"] == 9 and cfg["lte.window"] == 5 and cfg["gte.layers"] == 4
    assert cfg["rrm.radius"] == 3 and cfg["rrm.iterations"] == 5 and cfg["loss.gamma"] == 0.85
    assert cfg["regressor.state_dim"] == cfg["rrm.hidden_dim"] == 64


def test_config_validation():
    with pytest.raises(ConfigError, match="lte.windw"):
        make_config({"lte.windw": 3})
    with pytest.raises(ConfigError):
        make_config({"lte.window": 4})
    with pytest.raises(ConfigError):
        make_config({"lte.window": 11})
    with pytest.raises(ConfigError):
        make_config({"gte.layers": 2.5})
    with pytest.raises(ConfigError):
        make_config({"model.ablate": "only-rrm"})
    assert make_config({"train.lr": 1})["train.lr"] == 1.0


def test_load_config_and_env_seed(tmp_path, monkeypatch):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 3, "train.steps": 7}))
    assert load_config(p)["seed"] == 3
    monkeypatch.setenv("TAR_SEED", "11")
    cfg = load_config(p)
    assert cfg["seed"] == 11 and cfg["train.steps"] == 7
    assert set(cfg) == set(DEFAULTS)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert cli.main(["gen", "--out", str(d / "data.tarc"), "--seqs", "2", "--frames", "7", "--seed", "4",
                     "--resolution", "32"]) == 0
    (d / "cfg.json").write_text(json.dumps(TINY))
    assert cli.main(["train", "--config", str(d / "cfg.json"), "--dataset", str(d / "data.tarc"),
                     "--out", str(d / "run"), "--quiet"]) == 0
    return d


def test_gen_manifest_and_determinism(workdir, tmp_path):
    man = read_manifest(workdir / "data.tarc")
    assert man["meta"]["n_sequences"] == 2 and man["meta"]["T_total"] == 7
    cli.main(["gen", "--out", str(tmp_path / "again.tarc"), "--seqs", "2", "--frames", "7", "--seed", "4",
              "--resolution", "32"])
    assert (tmp_path / "again.tarc").read_bytes() == (workdir / "data.tarc").read_bytes()


def test_usage_errors(capsys):
    assert cli.main(["gen", "--seqs", "2"]) == 1
    assert cli.main(["gen", "--out", "x", "--bogus"]) == 1
    assert cli.main(["nope"]) == 1
    assert cli.main(["gradcheck", "--scope", "everything"]) == 1


def test_help_lists_flags(capsys):
    for cmd, flags in (("gen", ["--out", "--seqs", "--frames", "--seed"]),
                       ("train", ["--config", "--dataset", "--out", "--resume"]),
                       ("eval", ["--checkpoint", "--dataset", "--report", "--ablate"]),
                       ("gradcheck", ["--scope"]),
                       ("export", ["--checkpoint", "--dataset", "--frame", "--out"])):
        with pytest.raises(SystemExit) as exc:
            cli.main([cmd, "--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        assert all(f in out for f in flags), cmd


def test_train_invalid_key_and_resume(workdir, tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train.stepz": 3}))
    assert cli.main(["train", "--config", str(bad), "--dataset", str(workdir / "data.tarc"),
                     "--out", str(tmp_path / "r")]) == 2
    assert "train.stepz" in capsys.readouterr().err
    log = [json.loads(x) for x in (workdir / "run" / "log.jsonl").read_text().splitlines()]
    assert log[-1]["loss"] < log[0]["loss"] * 10 and [r["step"] for r in log] == [0, 1]
    more = tmp_path / "more.json"
    more.write_text(json.dumps({**TINY, "train.steps": 3}))
    assert cli.main(["train", "--config", str(more), "--dataset", str(workdir / "data.tarc"), "--out",
                     str(tmp_path / "r2"), "--resume", str(workdir / "run" / "checkpoint.tarc"), "--quiet"]) == 0
    steps = [json.loads(x)["step"] for x in (tmp_path / "r2" / "log.jsonl").read_text().splitlines()]
    assert steps == [2]


def test_eval_report_and_ablation(workdir, tmp_path):
    rep_path = tmp_path / "rep.json"
    assert cli.main(["eval", "--checkpoint", str(workdir / "run" / "checkpoint.tarc"), "--dataset",
                     str(workdir / "data.tarc"), "--report", str(rep_path), "--per-frame-csv",
                     str(tmp_path / "f.csv")]) == 0
    rep = json.loads(rep_path.read_text())
    for key in ("mpjpe_mm", "pa_mpjpe_mm", "pve_mm", "accel_mm_per_frame2"):
        assert set(rep[key]) == {"mean", "std"}
    assert rep["sequences"] == [1] and len(rep["stage_mpjpe_mm"]) == 6
    rows = (tmp_path / "f.csv").read_text().splitlines()
    assert len(rows) == 1 + 7
    for mode in ("only-gte", "only-lte"):
        assert cli.main(["eval", "--checkpoint", str(workdir / "run" / "checkpoint.tarc"), "--dataset",
                         str(workdir / "data.tarc"), "--report", str(tmp_path / f"{mode}.json"),
                         "--ablate", mode]) == 0
        assert json.loads((tmp_path / f"{mode}.json").read_text())["ablate"] == mode


def test_eval_rejects_incompatible_checkpoint(workdir, tmp_path, capsys):
    from tarmesh.train import build_model, save_checkpoint

    ds = Dataset.load(workdir / "data.tarc")
    other = build_model(make_config({**TINY, "features.local_dim": 6}), ds.model)
    save_checkpoint(tmp_path / "other.tarc", other, None, 0)
    from tarmesh.diffcore import load_container, save_container

    arrays, man = load_container(tmp_path / "other.tarc")
    man["meta"]["config"]["features.local_dim"] = 4
    save_container(tmp_path / "lying.tarc", arrays, man["meta"], kind="checkpoint")
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "lying.tarc"), "--dataset",
                     str(workdir / "data.tarc"), "--report", str(tmp_path / "r.json")]) == 2
    err = capsys.readouterr().err
    assert "checkpoint shape" in err and "model shape" in err


def test_export_gt_and_prediction(workdir, tmp_path):
    ds = Dataset.load(workdir / "data.tarc")
    obj = tmp_path / "gt.obj"
    assert cli.main(["export", "--dataset", str(workdir / "data.tarc"), "--frame", "2", "--out", str(obj),
                     "--source", "gt"]) == 0
    verts = np.array([[float(v) for v in line.split()[1:]] for line in obj.read_text().splitlines()
                      if line.startswith("v ")])
    assert verts.shape == (ds.model.n_vertices, 3)
    import torch

    from tarmesh import bodymodel as bm
    seq = ds.sequences[0]
    out = bm.body_forward(ds.model.tensors(torch.float64), torch.as_tensor(seq.theta[2]),
                          torch.as_tensor(seq.beta[2]))
    assert np.abs(verts - out.vertices.numpy()).max() < 1e-6
    side = json.loads(obj.with_suffix(".json").read_text())
    np.testing.assert_allclose(side["phi"]["theta"], seq.theta[2].reshape(-1), rtol=1e-8)
    assert side["metrics"]["mpjpe_mm"] == pytest.approx(0.0, abs=1e-6)
    for v in side["phi"]["theta"]:
        assert float(f"{v:.9g}") == v
    assert cli.main(["export", "--checkpoint", str(workdir / "run" / "checkpoint.tarc"), "--dataset",
                     str(workdir / "data.tarc"), "--frame", "0", "--out", str(tmp_path / "p.obj")]) == 0
    assert cli.main(["export", "--dataset", str(workdir / "data.tarc"), "--frame", "99", "--out",
                     str(tmp_path / "q.obj"), "--source", "gt"]) == 2


def test_gradcheck_ops_command(capsys):
    assert cli.main(["gradcheck", "--scope", "ops"]) == 0
    out = capsys.readouterr().out
    assert "ops/bilinear_sample" in out and "0 failure(s)" in out


def test_gradcheck_reports_corrupted_rule():
    import torch

    from tarmesh.gradsuite import GradItem, run_items

    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return torch.tanh(x)

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * (1 - torch.tanh(x))  # missing the square

    def build(g):
        x = torch.randn(5, generator=g, dtype=torch.float64, requires_grad=True)
        return (lambda: Wrong.apply(x).sum()), {"x": x}

    res = run_items([GradItem("corrupted_tanh", build)], tolerance=1e-5)
    assert not res[0].passed
