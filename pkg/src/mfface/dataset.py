"""Multi-frame samples: synthetic generation, serialization, external ingestion.

On-disk layout::

    dataset/manifest.txt            one line per subject: "<subject> <frame> <frame> ..."
    dataset/<subject>/<frame>.png   8-bit RGB image
    dataset/<subject>/<frame>.lmk.csv   header "index,x,y,confidence", 66 rows
    dataset/<subject>/gt.arc        optional ground truth (named-array archive)
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .archive import read_archive, write_archive
from .losses import LandmarkSet
from .mesh import N_LANDMARKS
from .model import FaceModel, FrameParams, IdentityParams, N_SH
from .render import CameraIntrinsics, rasterize_preview, read_image, render_vertices, write_image


MAX_LIGHT_DRAWS = 20
MAX_APPEARANCE_DRAWS = 50
MAX_SUBJECT_DRAWS = 50


class DatasetError(ValueError):
    pass


@dataclass
class Frame:
    image: np.ndarray
    landmarks: LandmarkSet
    name: str = ""


@dataclass
class GroundTruth:
    identity: IdentityParams
    frames: list[FrameParams]
    model: FaceModel | None = None


@dataclass
class MultiFrameSample:
    subject: str
    frames: list[Frame]
    ground_truth: GroundTruth | None = None

    def __post_init__(self):
        if len(self.frames) < 1:
            raise DatasetError(f"sample {self.subject!r} has no frames")
        shapes = {fr.image.shape for fr in self.frames}
        if len(shapes) != 1:
            raise DatasetError(f"sample {self.subject!r} mixes image sizes {sorted(shapes)}")

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def image_size(self) -> tuple[int, int]:
        h, w = self.frames[0].image.shape[:2]
        return w, h

    def subset(self, count: int) -> "MultiFrameSample":
        gt = self.ground_truth
        if gt is not None:
            gt = GroundTruth(gt.identity, gt.frames[:count], gt.model)
        return MultiFrameSample(self.subject, self.frames[:count], gt)


@dataclass
class GeneratorConfig:
    n_subjects: int = 10
    frames: int = 4
    image_size: int = 128
    identity_std: float = 1.0
    appearance_std: float = 1.0
    expression_std: float | None = None
    yaw_range_deg: float = 45.0
    pitch_std_deg: float = 5.0
    roll_std_deg: float = 3.0
    translation_jitter: float = 0.05
    depth: float = 4.0
    ambient: float = 0.8
    light_perturbation: float = 0.08
    background: float = 0.5
    max_hidden_depth: float = 0.2
    seed: int = 0
    first_subject: int = 0

    def __post_init__(self):
        if self.n_subjects < 1 or self.frames < 1 or self.image_size < 8:
            raise DatasetError("generator sizes must be positive (image_size >= 8)")
        if not self.max_hidden_depth > 0:
            raise DatasetError("max_hidden_depth must be positive")


def sample_yaws(rng: np.random.Generator, count: int, yaw_range: float) -> np.ndarray:
    """``count`` yaws in [-range, range] with pairwise separation >= 2*range/count."""
    if yaw_range <= 0:
        return np.zeros(count)
    span = 2.0 * yaw_range
    sep = span / count
    u = np.sort(rng.uniform(0.0, span - (count - 1) * sep, count))
    yaws = -yaw_range + u + sep * np.arange(count)
    return yaws[rng.permutation(count)]


def _sample_gamma(rng: np.random.Generator, cfg: GeneratorConfig) -> np.ndarray:
    gamma = np.zeros(3 * N_SH)
    gamma[:3] = cfg.ambient
    gamma[3:] = rng.normal(0.0, 1.0, 3 * (N_SH - 1)) * cfg.light_perturbation
    return gamma


def _frame_params(rng: np.random.Generator, model: FaceModel, cfg: GeneratorConfig, yaw: float) -> FrameParams:
    pitch = rng.normal(0.0, cfg.pitch_std_deg) if cfg.pitch_std_deg > 0 else 0.0
    roll = rng.normal(0.0, cfg.roll_std_deg) if cfg.roll_std_deg > 0 else 0.0
    rot = Rotation.from_euler("ZYX", [roll, yaw, pitch], degrees=True).as_rotvec()
    trans = np.array([0.0, 0.0, cfg.depth]) + rng.normal(0.0, 1.0, 3) * cfg.translation_jitter
    gamma = _sample_gamma(rng, cfg)
    sig = model.expression_sigmas if cfg.expression_std is None else np.full(model.n_expression, cfg.expression_std)
    delta = rng.normal(0.0, 1.0, model.n_expression) * sig
    return FrameParams(rot, trans, gamma, delta)


def render_frame(model: FaceModel, identity: IdentityParams, fp: FrameParams, intr: CameraIntrinsics,
                 background: float = 0.5) -> Frame:
    rec = render_vertices(model, identity, fp, intr)
    img = rasterize_preview(rec, model.mesh.faces, (intr.width, intr.height), background)
    lmk = LandmarkSet(rec.u[model.landmark_indices], np.ones(N_LANDMARKS))
    return Frame(img, lmk)


def _saturates(model: FaceModel, identity: IdentityParams, fp: FrameParams, intr: CameraIntrinsics) -> bool:
    rec = render_vertices(model, identity, fp, intr)
    c = rec.colors[rec.visible]
    return bool(np.any(c > 1.0) or np.any(c < 0.0))


def hidden_depth(model: FaceModel, identity: IdentityParams, fp: FrameParams, intr: CameraIntrinsics) -> float:
    """Largest depth by which a back-face-visible vertex lies behind the rendered surface.

    Measured against the nearest of the four pixel centres a bilinear lookup
    reads. Large values mean the vertex is self-occluded or seen nearly edge-on.
    """
    rec = render_vertices(model, identity, fp, intr)
    _, depth = rasterize_preview(rec, model.mesh.faces, (intr.width, intr.height), return_depth=True)
    idx = np.nonzero(rec.visible)[0]
    if len(idx) == 0:
        return 0.0
    x0 = np.clip(np.floor(rec.u[idx] - 0.5).astype(np.int64), 0, [intr.width - 2, intr.height - 2])
    near = np.minimum.reduce([depth[x0[:, 1] + dy, x0[:, 0] + dx] for dy in (0, 1) for dx in (0, 1)])
    return float(np.max(rec.v_cam[idx, 2] - near))


def _draw_subject(rng: np.random.Generator, gt_model: FaceModel, config: GeneratorConfig,
                  intr: CameraIntrinsics, sid: int):
    """One subject draw, or None when some frame shows a hidden vertex."""
    alpha = rng.normal(0.0, 1.0, gt_model.n_identity) * config.identity_std
    # reflectance must stay physical; redraw tail draws that leave [0, 1]
    for _ in range(MAX_APPEARANCE_DRAWS):
        beta = rng.normal(0.0, 1.0, gt_model.n_appearance) * config.appearance_std
        albedo = gt_model.appear_mean + gt_model.appear_basis @ beta
        if albedo.min() >= 0.0 and albedo.max() <= 1.0:
            break
    else:
        raise DatasetError(f"subject {sid}: no albedo draw inside [0, 1]; lower appearance_std")
    identity = IdentityParams(alpha, beta)
    yaws = sample_yaws(rng, config.frames, config.yaw_range_deg)
    params = []
    for f, yaw in enumerate(yaws):
        fp = _frame_params(rng, gt_model, config, yaw)
        # redraw the light until no visible vertex saturates; clipped pixels
        # would break the render/loss agreement
        for _ in range(MAX_LIGHT_DRAWS):
            if not _saturates(gt_model, identity, fp, intr):
                break
            fp.gamma = _sample_gamma(rng, config)
        else:
            raise DatasetError(f"subject {sid} frame {f}: every light draw saturates; "
                               "lower light_perturbation")
        # back-face culling treats hidden vertices as visible; keep them out of the data
        if hidden_depth(gt_model, identity, fp, intr) > config.max_hidden_depth:
            return None
        params.append(fp)
    return identity, params


def generate_synthetic(gt_model: FaceModel, config: GeneratorConfig) -> list[MultiFrameSample]:
    intr = CameraIntrinsics.default(config.image_size)
    out = []
    for sid in range(config.first_subject, config.first_subject + config.n_subjects):
        rng = np.random.default_rng([config.seed, sid])
        for _ in range(MAX_SUBJECT_DRAWS):
            drawn = _draw_subject(rng, gt_model, config, intr, sid)
            if drawn is not None:
                break
        else:
            raise DatasetError(f"subject {sid}: every draw has hidden vertices; "
                               "raise max_hidden_depth or narrow yaw_range_deg")
        identity, params = drawn
        frames = []
        for f, fp in enumerate(params):
            fr = render_frame(gt_model, identity, fp, intr, config.background)
            fr.name = f"f{f:02d}"
            frames.append(fr)
        out.append(MultiFrameSample(f"s{sid:04d}", frames, GroundTruth(identity, params, gt_model)))
    return out


def yaw_of(rotation: np.ndarray) -> float:
    return float(Rotation.from_rotvec(rotation).as_euler("ZYX", degrees=True)[1])


def _write_landmarks(path: Path, lmk: LandmarkSet) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "x", "y", "confidence"])
        for i, (p, c) in enumerate(zip(lmk.positions, lmk.confidences)):
            w.writerow([i, repr(float(p[0])), repr(float(p[1])), repr(float(c))])


def read_landmarks(path: str | Path) -> LandmarkSet:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"missing landmark file {path}")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != ["index", "x", "y", "confidence"]:
        raise DatasetError(f"{path}: bad header, expected index,x,y,confidence")
    body = [r for r in rows[1:] if r]
    if len(body) != N_LANDMARKS:
        raise DatasetError(f"{path}: expected {N_LANDMARKS} landmark rows, got {len(body)}")
    try:
        arr = np.array([[float(x) for x in r[1:4]] for r in body])
    except (ValueError, IndexError) as exc:
        raise DatasetError(f"{path}: malformed row ({exc})") from exc
    order = np.array([int(r[0]) for r in body])
    if sorted(order.tolist()) != list(range(N_LANDMARKS)):
        raise DatasetError(f"{path}: landmark indices must cover 0..{N_LANDMARKS - 1}")
    arr = arr[np.argsort(order)]
    return LandmarkSet(arr[:, :2], arr[:, 2])


def _gt_arrays(gt: GroundTruth) -> dict[str, np.ndarray]:
    return {
        "alpha": gt.identity.alpha,
        "beta": gt.identity.beta,
        "rotation": np.array([fp.rotation for fp in gt.frames]),
        "translation": np.array([fp.translation for fp in gt.frames]),
        "gamma": np.array([fp.gamma for fp in gt.frames]),
        "delta": np.array([fp.delta for fp in gt.frames]),
    }


def _gt_from_arrays(a: dict[str, np.ndarray]) -> GroundTruth:
    frames = [FrameParams(a["rotation"][i], a["translation"][i], a["gamma"][i], a["delta"][i])
              for i in range(len(a["rotation"]))]
    return GroundTruth(IdentityParams(a["alpha"], a["beta"]), frames)


def save_sample(directory: str | Path, sample: MultiFrameSample) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, fr in enumerate(sample.frames):
        name = fr.name or f"f{i:02d}"
        write_image(d / f"{name}.png", fr.image)
        _write_landmarks(d / f"{name}.lmk.csv", fr.landmarks)
    if sample.ground_truth is not None:
        write_archive(d / "gt.arc", _gt_arrays(sample.ground_truth))


def load_sample(directory: str | Path, frame_names: list[str] | None = None, subject: str | None = None) -> MultiFrameSample:
    d = Path(directory)
    if not d.is_dir():
        raise DatasetError(f"sample directory not found: {d}")
    if frame_names is None:
        frame_names = sorted(p.name[:-len(".lmk.csv")] for p in d.glob("*.lmk.csv"))
    if not frame_names:
        raise DatasetError(f"{d}: no frames")
    frames = []
    for name in frame_names:
        img_path = d / f"{name}.png"
        if not img_path.exists():
            raise DatasetError(f"{d}: missing image {img_path.name}")
        frames.append(Frame(read_image(img_path), read_landmarks(d / f"{name}.lmk.csv"), name))
    gt = _gt_from_arrays(read_archive(d / "gt.arc")) if (d / "gt.arc").exists() else None
    return MultiFrameSample(subject or d.name, frames, gt)


def save_dataset(root: str | Path, samples: list[MultiFrameSample]) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        save_sample(root / s.subject, s)
        names = [fr.name or f"f{i:02d}" for i, fr in enumerate(s.frames)]
        lines.append(" ".join([s.subject] + names))
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_dataset(root: str | Path) -> list[MultiFrameSample]:
    root = Path(root)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise DatasetError(f"{root}: missing manifest.txt")
    out = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) < 2:
            raise DatasetError(f"{manifest}:{lineno}: subject without frames")
        out.append(load_sample(root / parts[0], parts[1:], parts[0]))
    return out


def ingest_external(manifest: str | Path, frames_required: int = 4,
                    min_confidence: float = 0.5) -> list[MultiFrameSample]:
    """Group pre-cropped images into samples.

    Manifest lines read ``<subject> <image> <image> ...`` with paths relative to
    the manifest; each image needs a sidecar ``<stem>.lmk.csv``. Frames whose
    mean landmark confidence is below ``min_confidence`` are dropped, then
    samples with fewer than ``frames_required`` frames are dropped.
    """
    manifest = Path(manifest)
    if not manifest.exists():
        raise DatasetError(f"manifest not found: {manifest}")
    base = manifest.parent
    out = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        subject, paths = parts[0], parts[1:]
        if len(set(paths)) != len(paths):
            raise DatasetError(f"{manifest}:{lineno}: duplicate frame path in sample {subject!r}")
        frames = []
        for rel in paths:
            img_path = base / rel
            lmk_path = img_path.parent / (img_path.stem + ".lmk.csv")
            if not img_path.exists():
                raise DatasetError(f"{manifest}:{lineno}: missing image {rel}")
            if not lmk_path.exists():
                raise DatasetError(f"{manifest}:{lineno}: missing landmarks {lmk_path.name}")
            lmk = read_landmarks(lmk_path)
            if lmk.confidences.mean() < min_confidence:
                continue
            frames.append(Frame(read_image(img_path), lmk, img_path.stem))
        if len(frames) >= frames_required:
            out.append(MultiFrameSample(subject, frames))
    return out
