"""Command-line entry point: ``python3 -m mfface <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .autodiff import BLOCK_ORDER, ParamVector, finite_difference_check
from .config import ConfigError, RunConfig, load_config
from .dataset import GeneratorConfig, generate_synthetic, load_dataset, save_dataset
from .losses import LossBreakdown
from .evaluation import EvalReport, albedo_correlation, per_vertex_rmse, summary_table
from .mesh import load_landmark_indices, load_mesh, save_landmark_indices, save_mesh
from .model import (
    FaceModel,
    FrameParams,
    IdentityParams,
    assemble_appearance,
    assemble_vertices,
    init_model,
    load_blendshapes,
    load_model,
    save_blendshapes,
    save_model,
)
from .optim import (
    Schedule,
    default_schedule,
    fit_sample,
    fit_schedule,
    learn_model,
    load_checkpoint,
    load_store,
    save_store,
    write_log,
)
from .recovery import RecoveryConfig, run_recovery
from .render import CameraIntrinsics, rasterize_preview, render_vertices, shade, write_image
from .toy import make_gt_model, make_toy_assets

log = logging.getLogger("mfface")

GT_MODEL_NAME = "gt_model.arc"


class UsageError(Exception):
    pass


def _require(path: str | None, flag: str) -> Path:
    if path is None:
        raise UsageError(f"missing required {flag}")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{flag}: path not found: {p}")
    return p


def _out(args) -> Path:
    if args.out is None:
        raise UsageError("missing required --out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _gt_model(args, data: Path) -> FaceModel | None:
    if getattr(args, "gt_model", None):
        return load_model(_require(args.gt_model, "--gt-model"))
    cand = data / GT_MODEL_NAME
    return load_model(cand) if cand.exists() else None


def _neutral(model: FaceModel, alpha: np.ndarray) -> np.ndarray:
    return assemble_vertices(model, alpha, np.zeros(model.n_expression))


def cmd_toy(args, cfg: RunConfig) -> int:
    out = _out(args)
    mesh, blend, sig = make_toy_assets(cfg["mesh.vertices"])
    save_mesh(out / "mesh.obj", mesh)
    save_landmark_indices(out / "landmarks.txt", mesh.landmark_vertex_indices)
    save_blendshapes(out / "blendshapes.arc", blend, sig)
    gt = make_gt_model(mesh, blend, sig, node_count=cfg["gt.nodes"], n_identity=cfg["gt.identity"],
                       n_appearance=cfg["gt.appearance"], seed=cfg["gt.seed"])
    save_model(out / GT_MODEL_NAME, gt)
    learner = init_model(mesh, blend, sig, node_count=cfg["model.nodes"], n_identity=cfg["model.identity"],
                         n_appearance=cfg["model.appearance"], k=cfg["model.k"], seed=cfg["model.seed"])
    save_model(out / "init_model.arc", learner)
    print(f"wrote toy assets ({mesh.n_vertices} vertices) to {out}")
    return 0


def cmd_init(args, cfg: RunConfig) -> int:
    mesh = load_mesh(_require(args.mesh, "--mesh"))
    mesh.landmark_vertex_indices = load_landmark_indices(_require(args.landmarks, "--landmarks"))
    blend, sig = load_blendshapes(_require(args.blendshapes, "--blendshapes"))
    out = _out(args)
    model = init_model(mesh, blend, sig, node_count=cfg["model.nodes"], n_identity=cfg["model.identity"],
                       n_appearance=cfg["model.appearance"], k=cfg["model.k"], seed=cfg["model.seed"])
    save_model(out / "model.arc", model)
    print(f"wrote {out / 'model.arc'}")
    return 0


def cmd_generate(args, cfg: RunConfig) -> int:
    gt_path = _require(args.gt_model, "--gt-model")
    out = _out(args)
    gt = load_model(gt_path)
    gen = GeneratorConfig(
        n_subjects=args.subjects if args.subjects is not None else cfg["generate.subjects"],
        frames=args.frames if args.frames is not None else cfg["generate.frames"],
        image_size=cfg["generate.image_size"],
        identity_std=cfg["generate.identity_std"],
        appearance_std=cfg["generate.appearance_std"],
        yaw_range_deg=cfg["generate.yaw_range"],
        light_perturbation=cfg["generate.light"],
        seed=cfg["seed"],
        first_subject=cfg["generate.first_subject"],
    )
    samples = generate_synthetic(gt, gen)
    save_dataset(out, samples)
    shutil.copyfile(gt_path, out / GT_MODEL_NAME)
    print(f"wrote {len(samples)} samples x {gen.frames} frames to {out}")
    return 0


def _schedule(cfg: RunConfig) -> Schedule:
    return default_schedule(cfg["learn.warmup"], cfg["learn.joint"], cfg["learn.finetune"], cfg["learn.batch"])


def _resume_point(path: Path, schedule: Schedule) -> tuple[Path, str, int]:
    """``<dir>/phase<k>_<name>`` names the checkpoint written after phase k."""
    tag = path.name
    for suffix in (".model.arc", ".params.arc"):
        if tag.endswith(suffix):
            tag = tag[:-len(suffix)]
    head, _, name = tag.partition("_")
    if not head.startswith("phase") or not head[5:].isdigit():
        raise UsageError(f"--resume: {tag!r} is not a phase checkpoint (expected phase<k>_<name>)")
    k = int(head[5:])
    if not 1 <= k <= len(schedule.phases) or schedule.phases[k - 1].name != name:
        raise UsageError(f"--resume: {tag!r} does not match the configured schedule")
    if not (path.parent / f"{tag}.model.arc").exists():
        raise UsageError(f"--resume: checkpoint files for {tag!r} not found in {path.parent}")
    return path.parent, tag, k


def cmd_learn(args, cfg: RunConfig) -> int:
    data = _require(args.data, "--data")
    out = _out(args)
    schedule = _schedule(cfg)
    samples = load_dataset(data)
    if args.frames is not None:
        samples = [s.subset(args.frames) for s in samples]
    store, start = None, 0
    if args.resume:
        directory, tag, start = _resume_point(Path(args.resume), schedule)
        model, store = load_checkpoint(directory, tag)
        log.info("resuming after %s", tag)
    else:
        model = load_model(_require(args.model, "--model"))

    def progress(phase, iteration, loss):
        if iteration % 50 == 0:
            log.info("%s %d total %.6g", phase, iteration, loss.total)

    result = learn_model(samples, model, cfg.loss_weights(), schedule, cfg["seed"], sparsity=cfg.sparsity(),
                         checkpoint_dir=out / "checkpoints", store=store, start_phase=start, progress=progress)
    write_log(out / "log.csv", result.log)
    save_model(out / "model.arc", result.model)
    save_store(out / "params.arc", result.store)
    if result.log:
        print(f"learned {len(result.log)} iterations; total loss {result.log[0][-1]:.6g} -> {result.log[-1][-1]:.6g}")
    return 0


def _subjects(samples, wanted: str | None):
    if not wanted:
        return samples
    names = [w for w in wanted.split(",") if w]
    by = {s.subject: s for s in samples}
    missing = [n for n in names if n not in by]
    if missing:
        raise UsageError(f"--subjects: unknown subject(s) {', '.join(missing)}")
    return [by[n] for n in names]


def _overlay(image: np.ndarray, model: FaceModel, identity: IdentityParams, fp: FrameParams,
             intr: CameraIntrinsics) -> np.ndarray:
    rec = render_vertices(model, identity, fp, intr)
    img = image.copy()
    ui = np.floor(rec.u[rec.visible]).astype(np.int64)
    keep = (ui[:, 0] >= 0) & (ui[:, 0] < intr.width) & (ui[:, 1] >= 0) & (ui[:, 1] < intr.height)
    img[ui[keep, 1], ui[keep, 0]] = [0.1, 0.9, 0.2]
    lm = np.floor(rec.u[model.landmark_indices]).astype(np.int64)
    keep = (lm[:, 0] >= 0) & (lm[:, 0] < intr.width) & (lm[:, 1] >= 0) & (lm[:, 1] < intr.height)
    img[lm[keep, 1], lm[keep, 0]] = [1.0, 0.1, 0.1]
    return img


def cmd_fit(args, cfg: RunConfig) -> int:
    model = load_model(_require(args.model, "--model"))
    data = _require(args.data, "--data")
    out = _out(args)
    samples = _subjects(load_dataset(data), args.subjects)
    if args.frames is not None:
        if args.frames < 1:
            raise UsageError("--frames must be >= 1")
        short = [s.subject for s in samples if s.n_frames < args.frames]
        if short:
            raise UsageError(f"--frames {args.frames}: subject(s) with fewer frames: {', '.join(short[:5])}")
        samples = [s.subset(args.frames) for s in samples]
    gt_model = _gt_model(args, data)
    schedule = fit_schedule(cfg["fit.iterations"], cfg["fit.lr"], cfg["fit.final_lr_scale"])
    store, rmse, corr, names = {}, [], [], []
    for smp in samples:
        h, w = smp.frames[0].image.shape[:2]
        intr = CameraIntrinsics.default(w, h)
        res = fit_sample(model, smp, cfg.loss_weights(), schedule, cfg["seed"], intr=intr, sparsity=cfg.sparsity())
        store[smp.subject] = ParamVector.from_parts(res.identity, res.frames)
        for fr, fp in zip(smp.frames, res.frames):
            write_image(out / f"{smp.subject}_{fr.name or 'frame'}_overlay.png",
                        _overlay(fr.image, model, res.identity, fp, intr))
        log.info("%s: %d iterations, loss %.6g", smp.subject, len(res.trace), res.trace[-1].total)
        if smp.ground_truth is not None and gt_model is not None:
            names.append(smp.subject)
            rmse.append(per_vertex_rmse(_neutral(model, res.identity.alpha),
                                        _neutral(gt_model, smp.ground_truth.identity.alpha)))
            corr.append(albedo_correlation(assemble_appearance(model, res.identity.beta),
                                           assemble_appearance(gt_model, smp.ground_truth.identity.beta))[0])
    save_store(out / "params.arc", store)
    print(f"fitted {len(samples)} sample(s); parameters in {out / 'params.arc'}")
    if names:
        label = f"test M={args.frames or 'all'}"
        rep = EvalReport(label, names, rmse, model.mesh.bbox_diagonal(), np.array(corr))
        rep.write_csv(out / "metrics.csv")
        print(summary_table([rep]))
    return 0


def _pose(yaw_deg: float, pitch_deg: float, depth: float) -> tuple[np.ndarray, np.ndarray]:
    from scipy.spatial.transform import Rotation
    rot = Rotation.from_euler("ZYX", [0.0, yaw_deg, pitch_deg], degrees=True).as_rotvec()
    return rot, np.array([0.0, 0.0, depth])


def cmd_render(args, cfg: RunConfig) -> int:
    model = load_model(_require(args.model, "--model"))
    out = _out(args)
    intr = CameraIntrinsics.default(args.size)
    identity = IdentityParams.zeros(model)
    frame = FrameParams.neutral(model)
    frame.rotation, frame.translation = _pose(args.yaw, args.pitch, frame.translation[2])
    if args.params:
        store = load_store(_require(args.params, "--params"))
        subject = args.subject or sorted(store)[0]
        if subject not in store:
            raise UsageError(f"--subject: {subject!r} not in {args.params}")
        pv = store[subject]
        identity = pv.identity()
        frame = pv.frames()[min(args.frame, pv.n_frames - 1)]
    rec = render_vertices(model, identity, frame, intr)
    grey = np.full((model.n_vertices, 3), 0.7)
    white = np.zeros(27)
    white[:3] = 1.0
    key = white.copy()
    key[3 * 2:3 * 3] = 0.3
    key[3 * 3:3 * 4] = -0.2
    size = (intr.width, intr.height)
    passes = {
        "geometry": rasterize_preview(rec, model.mesh.faces, size, 0.0, colors=shade(grey, rec.n_cam, key)),
        "albedo": rasterize_preview(rec, model.mesh.faces, size, 0.0, colors=rec.albedo),
        "render": rasterize_preview(rec, model.mesh.faces, size, 0.5),
    }
    if args.data and args.params:
        samples = {s.subject: s for s in load_dataset(_require(args.data, "--data"))}
        smp = samples.get(subject)
        if smp is not None and args.frame < smp.n_frames:
            passes["overlay"] = _overlay(smp.frames[args.frame].image, model, identity, frame, intr)
    for name, img in passes.items():
        write_image(out / f"{name}.png", img)
    print(f"wrote {', '.join(sorted(passes))} to {out}")
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    if args.model:
        model = load_model(_require(args.model, "--model"))
    else:
        mesh, blend, sig = make_toy_assets(cfg["gradcheck.vertices"])
        model = make_gt_model(mesh, blend, sig, node_count=cfg["gradcheck.nodes"], n_identity=4, n_appearance=4,
                              seed=cfg["gt.seed"])
    gen = GeneratorConfig(n_subjects=1, frames=cfg["gradcheck.frames"], image_size=64, seed=cfg["seed"])
    sample = generate_synthetic(model, gen)[0]
    rng = np.random.default_rng(cfg["seed"])
    identity = IdentityParams(sample.ground_truth.identity.alpha + 0.1 * rng.normal(size=model.n_identity),
                              sample.ground_truth.identity.beta + 0.1 * rng.normal(size=model.n_appearance))
    frames = []
    for fp in sample.ground_truth.frames:
        frames.append(FrameParams(fp.rotation + 0.01 * rng.normal(size=3), fp.translation + 0.01 * rng.normal(size=3),
                                  fp.gamma + 0.01 * rng.normal(size=27), fp.delta + 0.1 * rng.normal(size=fp.delta.size)))
    params = ParamVector.from_parts(identity, frames, model, BLOCK_ORDER)
    weights = cfg.loss_weights()
    ok = True
    print(f"{'block':<14} {'checked':>8} {'skipped':>8} {'max rel err':>12} {'worst term':>10}  result")
    for block in BLOCK_ORDER:
        # each loss term separately, so a large term cannot hide an error in a small one
        reps = [finite_difference_check(model, sample, params, block, cfg["gradcheck.step"],
                                        cfg["gradcheck.tolerance"], weights=weights, term=term,
                                        max_coords=cfg["gradcheck.max_coords"], seed=cfg["seed"],
                                        sparsity=cfg.sparsity())
                for term in LossBreakdown.TERMS]
        worst = max(reps, key=lambda r: r.max_rel_error)
        passed = all(r.passed for r in reps)
        ok &= passed
        print(f"{block:<14} {len(worst.checked):>8} {worst.n_skipped:>8} {worst.max_rel_error:>12.3e} "
              f"{worst.term:>10}  {'pass' if passed else 'FAIL'}")
    print("all blocks pass" if ok else "gradient check FAILED")
    return 0 if ok else 1


def cmd_eval(args, cfg: RunConfig) -> int:
    if args.mesh or args.truth:
        a = load_mesh(_require(args.mesh, "--mesh"))
        b = load_mesh(_require(args.truth, "--truth"))
        value = per_vertex_rmse(a.vertices, b.vertices)
        print(f"rmse {value!r} ({100.0 * value / b.bbox_diagonal():.4f}% of diagonal)")
        return 0
    model = load_model(_require(args.model, "--model"))
    store = load_store(_require(args.params, "--params"))
    data = _require(args.data, "--data")
    gt_model = _gt_model(args, data)
    if gt_model is None:
        raise RuntimeError(f"no ground-truth model: pass --gt-model or place {GT_MODEL_NAME} in {data}")
    samples = [s for s in load_dataset(data) if s.subject in store]
    if not samples:
        raise RuntimeError("no fitted subject of the parameter store is in the dataset")
    missing = [s.subject for s in samples if s.ground_truth is None]
    if missing:
        raise RuntimeError(f"no ground truth for subject(s) {', '.join(missing[:5])}")
    names, rmse, corr = [], [], []
    for smp in samples:
        ident = store[smp.subject].identity()
        names.append(smp.subject)
        rmse.append(per_vertex_rmse(_neutral(model, ident.alpha), _neutral(gt_model, smp.ground_truth.identity.alpha)))
        corr.append(albedo_correlation(assemble_appearance(model, ident.beta),
                                       assemble_appearance(gt_model, smp.ground_truth.identity.beta))[0])
    rep = EvalReport(args.label, names, rmse, model.mesh.bbox_diagonal(), np.array(corr))
    out = _out(args)
    rep.write_csv(out / "eval.csv")
    table = summary_table([rep])
    (out / "summary.txt").write_text(table + "\n")
    print(table)
    return 0


def cmd_recover(args, cfg: RunConfig) -> int:
    out = _out(args)
    rc = RecoveryConfig(n_train=args.train, n_test=args.test, warmup=cfg["learn.warmup"], joint=cfg["learn.joint"],
                        finetune=cfg["learn.finetune"], batch=cfg["learn.batch"], fit_iterations=cfg["fit.iterations"],
                        seed=cfg["seed"])
    res = run_recovery(rc)
    reports = [res.baseline] + list(res.reports.values())
    for rep in reports:
        rep.write_csv(out / (rep.condition.replace(" ", "").replace("/", "_").replace("=", "") + ".csv"))
    table = summary_table(reports)
    (out / "summary.txt").write_text(table + "\n")
    print(table)
    return 0


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int, help="overrides the seed config key")
    common.add_argument("--threads", type=int, help="cap on BLAS/OpenMP threads")
    common.add_argument("--deterministic", action="store_true", help="single-threaded, ordered reductions")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mfface", description="Multi-frame face model learning and fitting.")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("toy", parents=[common], help="write the procedural toy mesh, blendshapes and models")
    sp = sub.add_parser("init", parents=[common], help="initialize a model from mesh and blendshapes")
    sp.add_argument("--mesh")
    sp.add_argument("--landmarks")
    sp.add_argument("--blendshapes")
    sp = sub.add_parser("generate", parents=[common], help="synthesize a multi-frame dataset")
    sp.add_argument("--gt-model")
    sp.add_argument("--subjects", type=int)
    sp.add_argument("--frames", type=int)
    sp = sub.add_parser("learn", parents=[common], help="learn a model with the staged schedule")
    sp.add_argument("--model")
    sp.add_argument("--data")
    sp.add_argument("--frames", type=int, help="use only the first N frames of each sample")
    sp.add_argument("--resume", help="checkpoint prefix <dir>/phase<k>_<name>")
    sp = sub.add_parser("fit", parents=[common], help="fit samples with a fixed model")
    sp.add_argument("--model")
    sp.add_argument("--data")
    sp.add_argument("--frames", type=int)
    sp.add_argument("--subjects", help="comma-separated subject ids")
    sp.add_argument("--gt-model")
    sp = sub.add_parser("render", parents=[common], help="render geometry, albedo, lit and overlay passes")
    sp.add_argument("--model")
    sp.add_argument("--params")
    sp.add_argument("--subject")
    sp.add_argument("--frame", type=int, default=0)
    sp.add_argument("--data")
    sp.add_argument("--yaw", type=float, default=0.0)
    sp.add_argument("--pitch", type=float, default=0.0)
    sp.add_argument("--size", type=int, default=256)
    sp = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every block")
    sp.add_argument("--model")
    sp = sub.add_parser("eval", parents=[common], help="RMSE and albedo correlation against ground truth")
    sp.add_argument("--model")
    sp.add_argument("--params")
    sp.add_argument("--data")
    sp.add_argument("--gt-model")
    sp.add_argument("--label", default="eval")
    sp.add_argument("--mesh", help="compare this mesh file ...")
    sp.add_argument("--truth", help="... against this one")
    sp = sub.add_parser("recover", parents=[common], help="run the synthetic recovery experiment")
    sp.add_argument("--train", type=int, default=50)
    sp.add_argument("--test", type=int, default=10)
    return p


COMMANDS = {
    "toy": cmd_toy, "init": cmd_init, "generate": cmd_generate, "learn": cmd_learn, "fit": cmd_fit,
    "render": cmd_render, "gradcheck": cmd_gradcheck, "eval": cmd_eval, "recover": cmd_recover,
}


def _setup_logging(verbose: bool) -> None:
    color = sys.stderr.isatty() and "NO_COLOR" not in os.environ
    fmt = "\033[2m%(levelname)s\033[0m %(message)s" if color else "%(levelname)s %(message)s"
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format=fmt, stream=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _setup_logging(args.verbose)
    try:
        cfg = load_config(args.config, args.set)
        if args.seed is not None:
            cfg.set("seed", args.seed)
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be >= 1")
    except (ConfigError, UsageError) as exc:
        print(f"mfface {args.command}: error: {exc}", file=sys.stderr)
        return 2
    limit = 1 if args.deterministic else args.threads
    guard = threadpool_limits(limits=limit) if limit is not None else contextlib.nullcontext()
    try:
        with guard:
            return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"mfface {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"mfface {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
