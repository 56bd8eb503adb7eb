import hashlib
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from mfface.cli import main
from mfface.mesh import Mesh, save_mesh
from mfface.render import read_image

SMALL = """\
mesh.vertices = 400
gt.nodes = 40
gt.identity = 4
gt.appearance = 4
model.nodes = 40
model.identity = 4
model.appearance = 4
generate.image_size = 64
generate.subjects = 2
generate.frames = 2
learn.warmup = 3
learn.joint = 4
learn.finetune = 3
learn.batch = 2
fit.iterations = 15
weights.smo = 0.001
weights.spa = 0.00001
weights.ble = 0.00001
"""


def digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.cfg"
    cfg.write_text(SMALL)
    assert main(["toy", "--config", str(cfg), "--out", str(root / "toy")]) == 0
    assert main(["generate", "--config", str(cfg), "--gt-model", str(root / "toy" / "gt_model.arc"),
                 "--out", str(root / "data")]) == 0
    return root, cfg


def test_generate_layout_and_bytes(work, tmp_path):
    root, cfg = work
    data = root / "data"
    subjects = [p for p in data.iterdir() if p.is_dir()]
    assert len(subjects) == 2
    assert (data / "manifest.txt").exists() and (data / "gt_model.arc").exists()
    assert main(["generate", "--config", str(cfg), "--gt-model", str(root / "toy" / "gt_model.arc"),
                 "--out", str(tmp_path)]) == 0
    for p in sorted(data.rglob("*")):
        if p.is_file():
            assert digest(p) == digest(tmp_path / p.relative_to(data)), p.name


def test_generate_missing_gt_model_is_usage_error(tmp_path, capsys):
    assert main(["generate", "--out", str(tmp_path)]) == 2
    assert "--gt-model" in capsys.readouterr().err
    assert main(["generate", "--gt-model", str(tmp_path / "none.arc"), "--out", str(tmp_path)]) == 2


def test_invalid_config_key_named(tmp_path, capsys):
    assert main(["toy", "--set", "learn.rate=1", "--out", str(tmp_path)]) == 2
    assert "learn.rate" in capsys.readouterr().err


def test_unknown_subcommand_exit_2():
    assert main(["frobnicate"]) == 2


def _learn(root, cfg, out, *extra):
    return main(["learn", "--config", str(cfg), "--deterministic", "--model", str(root / "toy" / "init_model.arc"),
                 "--data", str(root / "data"), "--out", str(out), *extra])


def test_learn_deterministic_and_resume(work, tmp_path):
    root, cfg = work
    a, b = tmp_path / "a", tmp_path / "b"
    assert _learn(root, cfg, a) == 0
    assert _learn(root, cfg, b) == 0
    for name in ("log.csv", "model.arc", "params.arc", "checkpoints/phase2_joint.model.arc"):
        assert digest(a / name) == digest(b / name), name
    rows = (a / "log.csv").read_text().splitlines()
    assert float(rows[-1].split(",")[-1]) < float(rows[1].split(",")[-1])
    c = tmp_path / "c"
    assert main(["learn", "--config", str(cfg), "--deterministic", "--data", str(root / "data"),
                 "--resume", str(a / "checkpoints" / "phase2_joint"), "--out", str(c)]) == 0
    assert digest(c / "model.arc") == digest(a / "model.arc")
    assert (c / "log.csv").read_text().splitlines()[1:] == rows[-3:]
    assert main(["learn", "--config", str(cfg), "--data", str(root / "data"),
                 "--resume", str(a / "checkpoints" / "phase7_x"), "--out", str(c)]) == 2


def test_fit_variable_frames_and_metrics(work, tmp_path):
    root, cfg = work
    model = root / "toy" / "gt_model.arc"
    for m in (1, 2):
        out = tmp_path / f"m{m}"
        assert main(["fit", "--config", str(cfg), "--deterministic", "--model", str(model),
                     "--data", str(root / "data"), "--frames", str(m), "--out", str(out)]) == 0
        assert (out / "params.arc").exists() and (out / "metrics.csv").exists()
        assert len(list(out.glob("*_overlay.png"))) == 2 * m
    again = tmp_path / "again"
    main(["fit", "--config", str(cfg), "--deterministic", "--model", str(model), "--data", str(root / "data"),
          "--frames", "1", "--out", str(again)])
    assert digest(again / "params.arc") == digest(tmp_path / "m1" / "params.arc")
    assert main(["fit", "--config", str(cfg), "--model", str(model), "--data", str(root / "data"),
                 "--frames", "3", "--out", str(tmp_path / "x")]) == 2


def test_render_passes(work, tmp_path):
    root, cfg = work
    model = root / "toy" / "gt_model.arc"
    for d in ("r1", "r2"):
        assert main(["render", "--model", str(model), "--size", "96", "--out", str(tmp_path / d)]) == 0
    for name in ("geometry", "albedo", "render"):
        assert digest(tmp_path / "r1" / f"{name}.png") == digest(tmp_path / "r2" / f"{name}.png")
    img = read_image(tmp_path / "r1" / "render.png")
    assert np.sum(np.any(np.abs(img - 0.5) > 0.02, axis=2)) > 500
    # the albedo pass of the toy model shows only values of its appearance range
    alb = read_image(tmp_path / "r1" / "albedo.png")
    assert alb.max() <= 1.0 and np.sum(np.any(alb > 0, axis=2)) > 500


def test_eval_meshes(work, tmp_path, capsys):
    root, _ = work
    mesh = root / "toy" / "mesh.obj"
    assert main(["eval", "--mesh", str(mesh), "--truth", str(mesh)]) == 0
    assert "rmse 0.0 " in capsys.readouterr().out
    assert main(["eval", "--mesh", str(mesh)]) == 2


def test_eval_without_ground_truth(work, tmp_path, capsys):
    root, cfg = work
    out = tmp_path / "fit"
    main(["fit", "--config", str(cfg), "--model", str(root / "toy" / "gt_model.arc"), "--data",
          str(root / "data"), "--out", str(out)])
    (root / "data" / "gt_model.arc").rename(root / "gt_moved.arc")
    try:
        code = main(["eval", "--model", str(root / "toy" / "gt_model.arc"), "--params", str(out / "params.arc"),
                     "--data", str(root / "data"), "--out", str(tmp_path / "e")])
    finally:
        (root / "gt_moved.arc").rename(root / "data" / "gt_model.arc")
    assert code == 1
    assert "ground-truth model" in capsys.readouterr().err
    assert main(["eval", "--model", str(root / "toy" / "gt_model.arc"), "--params", str(out / "params.arc"),
                 "--data", str(root / "data"), "--out", str(tmp_path / "e")]) == 0
    assert (tmp_path / "e" / "eval.csv").exists()


def test_eval_dimension_mismatch_runtime_error(work, tmp_path):
    root, _ = work
    a = Mesh(np.random.default_rng(0).normal(size=(10, 3)), [[0, 1, 2]])
    b = Mesh(np.random.default_rng(1).normal(size=(11, 3)), [[0, 1, 2]])
    save_mesh(tmp_path / "a.obj", a)
    save_mesh(tmp_path / "b.obj", b)
    assert main(["eval", "--mesh", str(tmp_path / "a.obj"), "--truth", str(tmp_path / "b.obj")]) == 1


def test_gradcheck_default_instance(capsys):
    assert main(["gradcheck", "--set", "gradcheck.max_coords=6"]) == 0
    out = capsys.readouterr().out
    assert "all blocks pass" in out and "geom_basis" in out


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "mfface", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "gradcheck" in res.stdout
