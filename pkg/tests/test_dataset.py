import numpy as np
import pytest

from mfface.dataset import (
    DatasetError,
    GeneratorConfig,
    MultiFrameSample,
    generate_synthetic,
    hidden_depth,
    ingest_external,
    load_dataset,
    load_sample,
    read_landmarks,
    sample_yaws,
    save_dataset,
    save_sample,
    yaw_of,
)
from mfface.losses import LandmarkSet
from mfface.model import assemble_appearance
from mfface.render import CameraIntrinsics, project, write_image

ZERO = dict(identity_std=0.0, appearance_std=0.0, expression_std=0.0, yaw_range_deg=0.0, pitch_std_deg=0.0,
            roll_std_deg=0.0, translation_jitter=0.0, light_perturbation=0.0)


def test_zero_variance_collapses_to_mean(small_model):
    cfg = GeneratorConfig(n_subjects=1, frames=1, image_size=64, **ZERO)
    smp = generate_synthetic(small_model, cfg)[0]
    gt = smp.ground_truth
    assert not np.any(gt.identity.alpha) and not np.any(gt.identity.beta)
    fp = gt.frames[0]
    assert not np.any(fp.rotation) and fp.translation.tolist() == [0.0, 0.0, cfg.depth]
    assert fp.gamma[:3].tolist() == [cfg.ambient] * 3 and not np.any(fp.gamma[3:])
    lm3 = small_model.mean_shape.reshape(-1, 3)[small_model.landmark_indices] + fp.translation
    u, _ = project(lm3, CameraIntrinsics.default(64))
    assert np.allclose(smp.frames[0].landmarks.positions, u, atol=1e-12)


def test_yaws_are_separated():
    rng = np.random.default_rng(0)
    for _ in range(50):
        y = np.sort(sample_yaws(rng, 4, 45.0))
        assert np.all(np.diff(y) >= 90.0 / 4 - 1e-9)
        assert y.min() >= -45 and y.max() <= 45


def test_generated_yaws_distinct(small_model):
    data = generate_synthetic(small_model, GeneratorConfig(n_subjects=2, frames=4, image_size=64))
    for smp in data:
        yaws = np.sort([yaw_of(fp.rotation) for fp in smp.ground_truth.frames])
        # pitch and roll perturb the extracted yaw slightly
        assert np.all(np.diff(yaws) >= 45.0 / 4)


def test_generation_is_seeded(small_model):
    cfg = GeneratorConfig(n_subjects=2, frames=2, image_size=48, seed=3)
    a = generate_synthetic(small_model, cfg)
    b = generate_synthetic(small_model, cfg)
    for sa, sb in zip(a, b):
        for fa, fb in zip(sa.frames, sb.frames):
            assert np.array_equal(fa.image, fb.image)
            assert np.array_equal(fa.landmarks.positions, fb.landmarks.positions)


def test_generated_subjects_are_physical(small_model):
    data = generate_synthetic(small_model, GeneratorConfig(n_subjects=3, frames=2, image_size=48))
    intr = CameraIntrinsics.default(48)
    for smp in data:
        gt = smp.ground_truth
        albedo = assemble_appearance(small_model, gt.identity.beta)
        assert albedo.min() >= 0 and albedo.max() <= 1
        for fp in gt.frames:
            assert hidden_depth(small_model, gt.identity, fp, intr) <= 0.2


def test_generator_config_validation():
    with pytest.raises(DatasetError):
        GeneratorConfig(n_subjects=0)
    with pytest.raises(DatasetError):
        GeneratorConfig(max_hidden_depth=0.0)


def test_saturating_light_raises(small_model):
    cfg = GeneratorConfig(n_subjects=1, frames=1, image_size=32, ambient=5.0, light_perturbation=0.0)
    with pytest.raises(DatasetError, match="saturates"):
        generate_synthetic(small_model, cfg)


def test_sample_roundtrip(tmp_path, small_sample):
    save_sample(tmp_path / "s", small_sample)
    back = load_sample(tmp_path / "s")
    a, b = small_sample.ground_truth, back.ground_truth
    assert np.array_equal(a.identity.alpha, b.identity.alpha)
    assert np.array_equal(a.identity.beta, b.identity.beta)
    for fa, fb in zip(a.frames, b.frames):
        for k in ("rotation", "translation", "gamma", "delta"):
            assert np.array_equal(getattr(fa, k), getattr(fb, k))
    for fa, fb in zip(small_sample.frames, back.frames):
        assert np.array_equal(fa.landmarks.positions, fb.landmarks.positions)
        assert np.max(np.abs(fa.image - fb.image)) <= 0.5 / 255 + 1e-12


def test_dataset_roundtrip_and_manifest(tmp_path, small_model):
    data = generate_synthetic(small_model, GeneratorConfig(n_subjects=2, frames=2, image_size=64))
    save_dataset(tmp_path, data)
    back = load_dataset(tmp_path)
    assert [s.subject for s in back] == [s.subject for s in data]
    assert all(s.n_frames == 2 for s in back)
    (tmp_path / "manifest.txt").write_text("lonely\n")
    with pytest.raises(DatasetError, match="manifest.txt:1"):
        load_dataset(tmp_path)


def test_landmark_csv_row_count(tmp_path):
    rows = ["index,x,y,confidence"] + [f"{i},1.0,2.0,1.0" for i in range(65)]
    (tmp_path / "a.lmk.csv").write_text("\n".join(rows) + "\n")
    with pytest.raises(DatasetError, match="expected 66"):
        read_landmarks(tmp_path / "a.lmk.csv")


def _external(tmp_path, confs):
    lines = []
    for i, c in enumerate(confs):
        write_image(tmp_path / f"img{i}.png", np.full((16, 16, 3), 0.5))
        rows = ["index,x,y,confidence"] + [f"{k},{k % 16}.0,{k // 16}.0,{c}" for k in range(66)]
        (tmp_path / f"img{i}.lmk.csv").write_text("\n".join(rows) + "\n")
        lines.append(f"img{i}.png")
    (tmp_path / "m.txt").write_text("subj " + " ".join(lines) + "\n")
    return tmp_path / "m.txt"


def test_ingest_four_frames(tmp_path):
    data = ingest_external(_external(tmp_path, [1.0] * 4))
    assert len(data) == 1 and data[0].n_frames == 4 and data[0].ground_truth is None


def test_ingest_drops_low_confidence(tmp_path):
    assert ingest_external(_external(tmp_path, [1.0, 1.0, 0.3, 1.0])) == []


def test_ingest_duplicate_paths(tmp_path):
    _external(tmp_path, [1.0])
    (tmp_path / "d.txt").write_text("s img0.png img0.png\n")
    with pytest.raises(DatasetError, match="duplicate"):
        ingest_external(tmp_path / "d.txt")


def test_sample_without_ground_truth_loads(tmp_path, small_sample):
    ext = MultiFrameSample("x", small_sample.frames)
    save_sample(tmp_path / "x", ext)
    assert load_sample(tmp_path / "x").ground_truth is None


def test_mixed_image_sizes_rejected(small_sample):
    from mfface.dataset import Frame

    fr = small_sample.frames[0]
    small = Frame(fr.image[:10, :10], LandmarkSet(fr.landmarks.positions, fr.landmarks.confidences))
    with pytest.raises(DatasetError):
        MultiFrameSample("bad", [fr, small])
