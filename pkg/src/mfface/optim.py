"""Per-sample fitting and model learning with a staged adaptive-moment optimizer."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .archive import read_archive, write_archive
from .autodiff import (
    BLOCK_ORDER,
    MODEL_BLOCKS,
    SAMPLE_BLOCKS,
    AutodiffError,
    ParamVector,
    _chroma_from,
    default_intrinsics,
    evaluate_with_gradient,
)
from .losses import LossBreakdown, LossWeights, SparsityConfig
from .model import FaceModel, FrameParams, IdentityParams, N_SH, load_model, ocl_project, save_model
from .render import CameraIntrinsics

log = logging.getLogger(__name__)

SAMPLE_LR = 1e-2
MODEL_LR = 1e-3
APPEARANCE_LR = 1e-2
APPEARANCE_BLOCKS = ("appear_basis", "appear_mean")
LOG_COLUMNS = ("iteration", "pho", "lan", "smo", "spa", "ble", "total")


class OptimError(ValueError):
    pass


class FitDivergence(OptimError):
    def __init__(self, message: str, trace: list[LossBreakdown]):
        super().__init__(message)
        self.trace = trace


class TrainingError(OptimError):
    pass


class OptimizerState:
    """Adaptive-moment buffers aligned to a :class:`ParamVector`.

    Bias correction uses a per-block step count, so a block unfrozen late
    starts with the usual first-step behaviour.
    """

    def __init__(self, params: ParamVector, learning_rates: dict[str, float] | None = None,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.m = np.zeros_like(params.data)
        self.v = np.zeros_like(params.data)
        self.step = 0
        self.block_steps = {name: 0 for name in params.blocks}
        self.learning_rates = {name: default_rate(name) for name in params.blocks}
        if learning_rates:
            self.set_rates(learning_rates)
        self.betas = betas
        self.eps = eps
        self.lr_scale = 1.0

    def set_rates(self, rates: dict[str, float]) -> None:
        for name, lr in rates.items():
            if name in self.learning_rates:
                if lr < 0:
                    raise OptimError(f"negative learning rate for {name}")
                self.learning_rates[name] = float(lr)


def default_rate(name: str) -> float:
    return SAMPLE_LR if name in SAMPLE_BLOCKS else MODEL_LR


def adaptive_step(state: OptimizerState, gradient: np.ndarray, params: ParamVector) -> ParamVector:
    """One bias-corrected adaptive-moment update of the active blocks, in place."""
    g = np.asarray(gradient, dtype=np.float64)
    if g.shape != params.data.shape or state.m.shape != params.data.shape:
        raise OptimError(f"gradient of shape {g.shape} for {params.data.shape[0]} parameters")
    b1, b2 = state.betas
    state.step += 1
    for name, blk in params.blocks.items():
        if not params.active[name]:
            continue
        sl = blk.slice
        gb = g[sl]
        if not np.all(np.isfinite(gb)):
            raise OptimError(f"non-finite gradient in block {name!r}")
        state.block_steps[name] += 1
        t = state.block_steps[name]
        state.m[sl] = b1 * state.m[sl] + (1 - b1) * gb
        state.v[sl] = b2 * state.v[sl] + (1 - b2) * gb * gb
        mhat = state.m[sl] / (1 - b1**t)
        vhat = state.v[sl] / (1 - b2**t)
        params.data[sl] -= state.lr_scale * state.learning_rates[name] * mhat / (np.sqrt(vhat) + state.eps)
    return params


@dataclass
class Phase:
    name: str
    active: tuple[str, ...]
    iterations: int
    learning_rates: dict[str, float] = field(default_factory=dict)
    batch_size: int = 1
    final_lr_scale: float = 1.0

    def __post_init__(self):
        self.active = tuple(self.active)
        if not self.active:
            raise OptimError(f"phase {self.name!r} has no active block")
        bad = [b for b in self.active if b not in BLOCK_ORDER]
        if bad:
            raise OptimError(f"phase {self.name!r}: unknown block(s) {', '.join(bad)}")
        if self.iterations < 0 or self.batch_size < 1:
            raise OptimError(f"phase {self.name!r}: iterations must be >= 0 and batch size >= 1")
        if not 0 < self.final_lr_scale <= 1:
            raise OptimError(f"phase {self.name!r}: final_lr_scale must lie in (0, 1]")

    def rate(self, name: str) -> float:
        return self.learning_rates.get(name, default_rate(name))

    def lr_scale(self, it: int) -> float:
        """Exponential decay from 1 at the first iteration to ``final_lr_scale`` at the last."""
        if self.final_lr_scale == 1.0 or self.iterations <= 1:
            return 1.0
        return self.final_lr_scale ** (it / (self.iterations - 1))


@dataclass
class Schedule:
    phases: list[Phase]

    def __post_init__(self):
        if not self.phases:
            raise OptimError("a schedule needs at least one phase")

    @property
    def total_iterations(self) -> int:
        return sum(p.iterations for p in self.phases)


def default_schedule(warmup: int = 200, joint: int = 1500, finetune: int = 300, batch_size: int = 8) -> Schedule:
    sample_rates = {b: SAMPLE_LR for b in SAMPLE_BLOCKS}
    model_rates = {b: MODEL_LR for b in MODEL_BLOCKS}
    fine = {**sample_rates, **model_rates, **{b: APPEARANCE_LR for b in APPEARANCE_BLOCKS}}
    return Schedule([
        Phase("warmup", SAMPLE_BLOCKS, warmup, dict(sample_rates), batch_size),
        Phase("joint", BLOCK_ORDER, joint, dict(sample_rates, **model_rates), batch_size),
        Phase("finetune", BLOCK_ORDER, finetune, fine, batch_size),
    ])


def fit_schedule(iterations: int = 400, lr: float = SAMPLE_LR, final_lr_scale: float = 0.01) -> Schedule:
    return Schedule([Phase("fit", SAMPLE_BLOCKS, iterations, {b: lr for b in SAMPLE_BLOCKS},
                           final_lr_scale=final_lr_scale)])


def initial_params(model: FaceModel, sample, intr: CameraIntrinsics | None = None) -> ParamVector:
    """Start point for a sample: zero identity and expression, frontal pose,
    depth and offset matched to the landmark box, band-0 light matched to the
    mean intensity of the face region."""
    intr = default_intrinsics(sample) if intr is None else intr
    lm3 = model.mean_shape.reshape(-1, 3)[model.landmark_indices]
    centre = lm3.mean(axis=0)
    model_diag = np.linalg.norm(lm3[:, :2].max(0) - lm3[:, :2].min(0))
    focal = 0.5 * (intr.fx + intr.fy)
    mean_albedo = float(np.mean(model.appear_mean))
    frames = []
    for fr in sample.frames:
        ls = fr.landmarks
        use = ls.confidences > 0
        pts = ls.positions[use] if np.any(use) else ls.positions
        lo, hi = pts.min(0), pts.max(0)
        diag = max(float(np.linalg.norm(hi - lo)), 1e-6)
        z = focal * model_diag / diag
        c = pts.mean(axis=0)
        t = np.array([(c[0] - intr.cx) * z / intr.fx - centre[0],
                      (c[1] - intr.cy) * z / intr.fy - centre[1],
                      z - centre[2]])
        h, w = fr.image.shape[:2]
        x0, y0 = np.clip(np.floor(lo).astype(int), 0, [w - 1, h - 1])
        x1, y1 = np.clip(np.ceil(hi).astype(int), 1, [w, h])
        face = fr.image[y0:y1, x0:x1].reshape(-1, 3)
        gamma = np.zeros(3 * N_SH)
        gamma[:3] = float(face.mean()) / max(mean_albedo, 1e-6) if len(face) else 1.0
        frames.append(FrameParams(np.zeros(3), t, gamma, np.zeros(model.n_expression)))
    return ParamVector.from_parts(IdentityParams.zeros(model), frames)


class FitResult(NamedTuple):
    identity: IdentityParams
    frames: list[FrameParams]
    trace: list[LossBreakdown]


def _sparsity_weights(model: FaceModel, params: ParamVector, cfg: SparsityConfig) -> np.ndarray:
    am = params["appear_mean"] if "appear_mean" in params else model.appear_mean
    ab = params["appear_basis"] if "appear_basis" in params else model.appear_basis
    return _chroma_from((am + ab @ params["beta"]).reshape(-1, 3), model, cfg)


def fit_sample(
    model: FaceModel,
    sample,
    weights: LossWeights = LossWeights(),
    schedule: Schedule | None = None,
    seed: int = 0,
    *,
    init: ParamVector | None = None,
    intr: CameraIntrinsics | None = None,
    sparsity: SparsityConfig = SparsityConfig(),
    tol: float = 1e-6,
    window: int = 20,
    refresh: int = 50,
    divergence: float = 1e6,
) -> FitResult:
    """Fit shared identity and per-frame parameters to a sample; the model stays fixed.

    Each phase runs until its iteration budget or until the relative loss
    improvement over ``window`` iterations drops below ``tol``.  The fit is
    deterministic; ``seed`` is accepted for interface symmetry with learning.
    """
    if sample.n_frames < 1:
        raise OptimError("sample has no frames")
    del seed
    intr = default_intrinsics(sample) if intr is None else intr
    schedule = fit_schedule() if schedule is None else schedule
    params = initial_params(model, sample, intr) if init is None else init.copy()
    if params.n_frames != sample.n_frames:
        raise OptimError(f"initial parameters have {params.n_frames} frames, sample has {sample.n_frames}")
    trace: list[LossBreakdown] = []
    totals: list[float] = []
    for phase in schedule.phases:
        active = [b for b in phase.active if b in SAMPLE_BLOCKS]
        if not active:
            continue
        params.set_active(active)
        state = OptimizerState(params, {b: phase.rate(b) for b in active})
        spw = None
        for it in range(phase.iterations):
            if it % refresh == 0:
                spw = _sparsity_weights(model, params, sparsity)
            try:
                loss, grad = evaluate_with_gradient(model, sample, params, weights, intr=intr,
                                                    sparsity_weights=spw, sparsity=sparsity)
            except AutodiffError as exc:
                raise FitDivergence(f"fit diverged: {exc}", trace) from exc
            trace.append(loss)
            totals.append(loss.total)
            if not np.isfinite(loss.total) or loss.total > divergence:
                raise FitDivergence(f"fit diverged at iteration {len(trace)}: loss {loss.total:.3g}", trace)
            if len(totals) > window:
                prev = totals[-1 - window]
                if (prev - loss.total) < tol * max(abs(prev), 1e-300):
                    break
            state.lr_scale = phase.lr_scale(it)
            adaptive_step(state, grad, params)
            params.wrap_rotations()
    return FitResult(params.identity(), params.frames(), trace)


@dataclass
class LearnResult:
    model: FaceModel
    store: dict[str, ParamVector]
    log: list[list[float]]


def _model_vector(model: FaceModel) -> ParamVector:
    return ParamVector({b: getattr(model, b) for b in MODEL_BLOCKS})


def _combined(sample_params: ParamVector, model_params: ParamVector, active) -> ParamVector:
    arrays = {b: sample_params[b] for b in SAMPLE_BLOCKS}
    arrays.update({b: model_params[b] for b in MODEL_BLOCKS})
    return ParamVector(arrays, active)


def save_store(path: str | Path, store: dict[str, ParamVector]) -> None:
    write_archive(path, {f"{subject}/{b}": pv[b] for subject, pv in store.items() for b in SAMPLE_BLOCKS})


def load_store(path: str | Path) -> dict[str, ParamVector]:
    arrays = read_archive(path)
    grouped: dict[str, dict[str, np.ndarray]] = {}
    for key, value in arrays.items():
        subject, _, block = key.rpartition("/")
        if block not in SAMPLE_BLOCKS or not subject:
            raise OptimError(f"{path}: unexpected entry {key!r}")
        grouped.setdefault(subject, {})[block] = value
    out = {}
    for subject, arr in grouped.items():
        missing = [b for b in SAMPLE_BLOCKS if b not in arr]
        if missing:
            raise OptimError(f"{path}: subject {subject} lacks {', '.join(missing)}")
        out[subject] = ParamVector(arr, SAMPLE_BLOCKS)
    return out


def write_log(path: str | Path, rows: list[list[float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for row in rows:
            w.writerow([int(row[0])] + [repr(float(x)) for x in row[1:]])


def _checkpoint(directory: Path | None, tag: str, model: FaceModel, store: dict[str, ParamVector]) -> None:
    if directory is None:
        return
    directory.mkdir(parents=True, exist_ok=True)
    save_model(directory / f"{tag}.model.arc", model)
    save_store(directory / f"{tag}.params.arc", store)


def learn_model(
    dataset,
    model: FaceModel,
    weights: LossWeights = LossWeights(),
    schedule: Schedule | None = None,
    seed: int = 0,
    *,
    intr: CameraIntrinsics | None = None,
    sparsity: SparsityConfig = SparsityConfig(),
    checkpoint_dir: str | Path | None = None,
    store: dict[str, ParamVector] | None = None,
    start_phase: int = 0,
    progress=None,
) -> LearnResult:
    """Jointly optimize the model blocks and every sample's parameters.

    Each step draws a mini-batch (seeded by ``(seed, iteration)``), sums the
    sample losses and updates the active blocks.  The geometry basis is
    projected back onto the blendshape complement after every update, and the
    sparsity weights are refreshed once per epoch.  A checkpoint (model and
    parameter store) is written after every phase.
    """
    samples = list(dataset)
    if not samples:
        raise OptimError("dataset is empty")
    schedule = default_schedule() if schedule is None else schedule
    intr = default_intrinsics(samples[0]) if intr is None else intr
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    model = model.copy()
    # a resumed run starts from a checkpoint that is already projected; projecting
    # again would perturb the last bits and break bitwise resume
    if start_phase == 0:
        model.geom_basis = ocl_project(model.geom_basis, model.graph_blendshapes)
    names = [s.subject for s in samples]
    if len(set(names)) != len(names):
        raise OptimError("sample subject ids must be unique")
    if store is None:
        store = {s.subject: initial_params(model, s, intr) for s in samples}
    else:
        store = {k: v.copy() for k, v in store.items()}
        missing = [n for n in names if n not in store]
        if missing:
            raise OptimError(f"parameter store lacks subject(s) {', '.join(missing[:5])}")
    model_pv = _model_vector(model)
    rows: list[list[float]] = []
    iteration = sum(p.iterations for p in schedule.phases[:start_phase])
    for pi, phase in enumerate(schedule.phases):
        if pi < start_phase:
            continue
        s_active = [b for b in phase.active if b in SAMPLE_BLOCKS]
        m_active = [b for b in phase.active if b in MODEL_BLOCKS]
        sample_states = {}
        model_pv.set_active(m_active)
        model_state = OptimizerState(model_pv, {b: phase.rate(b) for b in MODEL_BLOCKS})
        batch = min(phase.batch_size, len(samples))
        epoch = max(1, -(-len(samples) // batch))
        spw: dict[str, np.ndarray] = {}
        for it in range(phase.iterations):
            if it % epoch == 0:
                spw = {s.subject: _sparsity_weights(model, store[s.subject], sparsity) for s in samples}
            scale = phase.lr_scale(it)
            model_state.lr_scale = scale
            for state in sample_states.values():
                state.lr_scale = scale
            rng = np.random.default_rng([seed, iteration])
            picks = np.sort(rng.choice(len(samples), batch, replace=False))
            g_model = np.zeros_like(model_pv.data)
            total = LossBreakdown()
            try:
                for i in picks:
                    smp = samples[i]
                    sp = store[smp.subject]
                    pv = _combined(sp, model_pv, phase.active)
                    loss, grad = evaluate_with_gradient(model, smp, pv, weights, intr=intr,
                                                        sparsity_weights=spw[smp.subject], sparsity=sparsity)
                    total = total + loss
                    if s_active:
                        sp.set_active(s_active)
                        state = sample_states.get(smp.subject)
                        if state is None:
                            state = sample_states[smp.subject] = OptimizerState(
                                sp, {b: phase.rate(b) for b in SAMPLE_BLOCKS})
                            state.lr_scale = scale
                        n_sample = sum(pv.blocks[b].size for b in SAMPLE_BLOCKS)
                        adaptive_step(state, grad[:n_sample], sp)
                        sp.wrap_rotations()
                    if m_active:
                        g_model += grad[pv.blocks["geom_basis"].start:]
                if m_active:
                    adaptive_step(model_state, g_model, model_pv)
                    model_pv["geom_basis"] = ocl_project(model_pv["geom_basis"], model.graph_blendshapes)
                    for b in MODEL_BLOCKS:
                        setattr(model, b, model_pv[b].copy())
            except (AutodiffError, OptimError) as exc:
                _checkpoint(ckpt, "abort", model, store)
                raise TrainingError(f"non-finite update at iteration {iteration}: {exc}") from exc
            rows.append([iteration] + [total.pho, total.lan, total.smo, total.spa, total.ble, total.total])
            if progress is not None:
                progress(phase.name, iteration, total)
            iteration += 1
        _checkpoint(ckpt, f"phase{pi + 1}_{phase.name}", model, store)
        log.info("phase %s done at iteration %d", phase.name, iteration)
    return LearnResult(model, store, rows)


def load_checkpoint(directory: str | Path, tag: str) -> tuple[FaceModel, dict[str, ParamVector]]:
    directory = Path(directory)
    return load_model(directory / f"{tag}.model.arc"), load_store(directory / f"{tag}.params.arc")
