"""Reverse-mode gradients of the total loss and a finite-difference checker.

The computation from parameters to loss is a fixed pipeline, so instead of a
general expression graph each stage records one fused backward closure on a
:class:`GradientTape`.  The forward pass uses the same primitives, in the same
order, as :func:`mfface.losses.total_loss`, so both report the same loss.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import (
    LandmarkSet,
    LossBreakdown,
    LossError,
    LossWeights,
    SparsityConfig,
)
from .mesh import N_LANDMARKS, compute_vertex_normals
from .model import FaceModel, FrameParams, IdentityParams, N_SH, ocl_project, wrap_rotation
from .render import (
    CameraIntrinsics,
    bilinear_cells,
    project,
    rotation_jacobian,
    rotation_matrix,
    sample_image,
    sample_image_with_grad,
    sh_basis,
    sh_basis_grad,
    visible_set,
)

SAMPLE_BLOCKS = ("alpha", "beta", "rotation", "translation", "gamma", "delta")
MODEL_BLOCKS = ("geom_basis", "appear_basis", "appear_mean")
BLOCK_ORDER = SAMPLE_BLOCKS + MODEL_BLOCKS


class AutodiffError(ValueError):
    pass


@dataclass(frozen=True)
class Block:
    name: str
    start: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def slice(self) -> slice:
        return slice(self.start, self.start + self.size)


class ParamVector:
    """Flat storage for named parameter blocks with active/frozen flags.

    Indexing by block name returns a writable view shaped like the block.
    """

    def __init__(self, arrays: dict[str, np.ndarray], active=None):
        unknown = set(arrays) - set(BLOCK_ORDER)
        if unknown:
            raise AutodiffError(f"unknown parameter block(s): {', '.join(sorted(unknown))}")
        blocks, start = {}, 0
        for name in BLOCK_ORDER:
            if name in arrays:
                shape = np.shape(arrays[name])
                blocks[name] = Block(name, start, shape)
                start += blocks[name].size
        self.blocks: dict[str, Block] = blocks
        self.data = np.empty(start)
        for name, b in blocks.items():
            self.data[b.slice] = np.asarray(arrays[name], dtype=np.float64).ravel()
        names = set(blocks) if active is None else set(active)
        missing = names - set(blocks)
        if missing:
            raise AutodiffError(f"cannot activate absent block(s): {', '.join(sorted(missing))}")
        self.active = {name: name in names for name in blocks}

    @classmethod
    def from_parts(cls, identity: IdentityParams, frames: list[FrameParams], model: FaceModel | None = None,
                   active=SAMPLE_BLOCKS) -> "ParamVector":
        """Per-sample blocks from ``identity``/``frames``; model blocks too if ``model`` is given."""
        if not frames:
            raise AutodiffError("at least one frame is required")
        arrays = {
            "alpha": identity.alpha,
            "beta": identity.beta,
            "rotation": np.stack([f.rotation for f in frames]),
            "translation": np.stack([f.translation for f in frames]),
            "gamma": np.stack([f.gamma for f in frames]),
            "delta": np.stack([f.delta for f in frames]),
        }
        if model is not None:
            arrays.update(geom_basis=model.geom_basis, appear_basis=model.appear_basis,
                          appear_mean=model.appear_mean)
        return cls(arrays, active)

    def __contains__(self, name: str) -> bool:
        return name in self.blocks

    def __getitem__(self, name: str) -> np.ndarray:
        b = self.blocks[name]
        return self.data[b.slice].reshape(b.shape)

    def __setitem__(self, name: str, value) -> None:
        b = self.blocks[name]
        self.data[b.slice] = np.broadcast_to(np.asarray(value, dtype=np.float64), b.shape).ravel()

    @property
    def names(self) -> list[str]:
        return list(self.blocks)

    @property
    def n_frames(self) -> int:
        return self.blocks["rotation"].shape[0]

    def is_active(self, name: str) -> bool:
        return self.active.get(name, False)

    def set_active(self, names) -> None:
        names = set(names)
        missing = names - set(self.blocks)
        if missing:
            raise AutodiffError(f"cannot activate absent block(s): {', '.join(sorted(missing))}")
        self.active = {name: name in names for name in self.blocks}

    def active_names(self) -> list[str]:
        return [n for n in self.blocks if self.active[n]]

    def active_mask(self) -> np.ndarray:
        mask = np.zeros(len(self.data), dtype=bool)
        for name, b in self.blocks.items():
            mask[b.slice] = self.active[name]
        return mask

    def copy(self) -> "ParamVector":
        out = ParamVector.__new__(ParamVector)
        out.blocks = dict(self.blocks)
        out.data = self.data.copy()
        out.active = dict(self.active)
        return out

    def identity(self) -> IdentityParams:
        return IdentityParams(self["alpha"].copy(), self["beta"].copy())

    def frames(self) -> list[FrameParams]:
        return [
            FrameParams(self["rotation"][f].copy(), self["translation"][f].copy(),
                        self["gamma"][f].copy(), self["delta"][f].copy())
            for f in range(self.n_frames)
        ]

    def wrap_rotations(self) -> None:
        self["rotation"] = wrap_rotation(self["rotation"])

    def apply_to(self, model: FaceModel) -> FaceModel:
        """A copy of ``model`` carrying this vector's model blocks."""
        out = model.copy()
        for name in MODEL_BLOCKS:
            if name in self:
                setattr(out, name, self[name].copy())
        return out


class GradientTape:
    """Ordered backward closures plus named gradient accumulators.

    Each closure reads the gradients of its stage outputs and adds into the
    gradients of its inputs; :meth:`backward` runs them in reverse order.
    """

    def __init__(self):
        self._ops: list[tuple[str, object]] = []
        self.grads: dict = {}

    def record(self, name: str, backward) -> None:
        self._ops.append((name, backward))

    def grad(self, key):
        return self.grads.get(key)

    def accumulate(self, key, value: np.ndarray) -> None:
        cur = self.grads.get(key)
        if cur is None:
            self.grads[key] = np.array(value, dtype=np.float64, copy=True)
        else:
            cur += value

    def backward(self) -> None:
        for _, fn in reversed(self._ops):
            fn(self)

    def clear(self) -> None:
        self._ops.clear()
        self.grads.clear()

    def __len__(self) -> int:
        return len(self._ops)


@dataclass
class ForwardResult:
    terms: dict[str, float]
    visible: list[np.ndarray]
    cells: list[np.ndarray]
    visible_count: int


def default_intrinsics(sample) -> CameraIntrinsics:
    h, w = sample.frames[0].image.shape[:2]
    return CameraIntrinsics.default(w, h)


def _model_block(params: ParamVector, model: FaceModel, name: str) -> np.ndarray:
    return params[name] if name in params else getattr(model, name)


def forward(
    model: FaceModel,
    sample,
    params: ParamVector,
    weights: LossWeights,
    *,
    intr: CameraIntrinsics | None = None,
    sparsity_weights: np.ndarray | None = None,
    sparsity: SparsityConfig = SparsityConfig(),
    tape: GradientTape | None = None,
) -> ForwardResult:
    """Evaluate every loss term; with a tape, also record the backward pass."""
    frames = sample.frames
    nf = params.n_frames
    if nf != len(frames):
        raise LossError(f"{nf} frame parameter sets for {len(frames)} frames")
    intr = default_intrinsics(sample) if intr is None else intr
    rec = tape is not None
    mesh = model.mesh
    nv = model.n_vertices

    theta_s = _model_block(params, model, "geom_basis")
    theta_a = _model_block(params, model, "appear_basis")
    r_mean = _model_block(params, model, "appear_mean")
    alpha, beta = params["alpha"], params["beta"]
    rot, trans = params["rotation"], params["translation"]
    gamma, delta = params["gamma"], params["delta"]
    bg = model.graph_blendshapes

    proj_basis = ocl_project(theta_s, bg)
    dg = proj_basis @ alpha
    base = model.mean_shape + model.skinning.apply(dg).ravel()
    albedo = (r_mean + theta_a @ beta).reshape(-1, 3)

    if rec:
        def back_geometry(t: GradientTape):
            g = t.grad("dg")
            if g is None:
                return
            t.accumulate("alpha", proj_basis.T @ g)
            if params.is_active("geom_basis"):
                t.accumulate("geom_basis", ocl_project(np.outer(g, alpha), bg))
        tape.record("geometry", back_geometry)

        def back_base(t: GradientTape):
            g = t.grad("base")
            if g is not None:
                t.accumulate("dg", (model.skinning.matrix.T @ g.reshape(nv, 3)).ravel())
        tape.record("skinning", back_base)

        def back_albedo(t: GradientTape):
            g = t.grad("albedo")
            if g is None:
                return
            g = g.ravel()
            t.accumulate("appear_mean", g)
            t.accumulate("beta", theta_a.T @ g)
            if params.is_active("appear_basis"):
                t.accumulate("appear_basis", np.outer(g, beta))
        tape.record("albedo", back_albedo)

    visible, cells, records = [], [], []
    for f in range(nf):
        v = base + model.blendshapes @ delta[f]
        vv = v.reshape(-1, 3)
        n = compute_vertex_normals(mesh, vv)
        r = rotation_matrix(rot[f])
        v_cam = vv @ r.T + trans[f]
        n_cam = n @ r.T
        vis = visible_set(v_cam, n_cam, intr)
        u, front = project(v_cam, intr)
        h = sh_basis(n_cam, check=False)
        gam = gamma[f].reshape(N_SH, 3)
        irr = h @ gam
        colors = albedo * irr
        idx = np.nonzero(vis)[0]
        visible.append(vis)
        cells.append(bilinear_cells(frames[f].image.shape[:2], u[idx]))
        records.append((u, colors, idx))

        if rec:
            tape.record(f"frame{f}", _frame_backward(
                f, model, vv, n, r, rot[f], v_cam, n_cam, u, front, h, gam, irr, albedo, intr))

    # photometric term, summed exactly as the reference does
    total, count = 0.0, 0
    for f, (u, colors, idx) in enumerate(records):
        if len(idx) == 0:
            continue
        diff = sample_image(frames[f].image, u[idx]) - colors[idx]
        total += float(np.sum(diff * diff))
        count += len(idx)
    if count == 0:
        raise LossError("model invisible: no visible vertex in any frame")
    pho_scale = 1.0 / count if weights.normalize else 1.0
    pho = total / count if weights.normalize else total

    lan_total = 0.0
    lmk = model.landmark_indices
    for f, (u, _, _) in enumerate(records):
        ls: LandmarkSet = frames[f].landmarks
        d = ls.positions - u[lmk]
        lan_total += float(np.sum(ls.confidences * np.sum(d * d, axis=1)))
    lan_scale = 1.0 / (nf * N_LANDMARKS) if weights.normalize else 1.0
    lan = lan_total / (nf * N_LANDMARKS) if weights.normalize else lan_total

    t_nodes = (proj_basis @ alpha).reshape(-1, 3)
    d_nodes = model.node_pair_difference @ t_nodes
    smo = float(np.sum(d_nodes * d_nodes))

    if sparsity_weights is None:
        sparsity_weights = _chroma_from(albedo, model, sparsity)
    d_alb = model.vertex_pair_difference @ albedo
    q = np.sum(d_alb * d_alb, axis=1) + sparsity.eps_norm**2
    spa = float(np.sum(sparsity_weights * q ** (sparsity.p / 2)))

    sig = model.expression_sigmas
    ble = float(sum(np.sum((delta[f] / sig) ** 2) for f in range(nf)))

    terms = {"pho": pho, "lan": lan, "smo": smo, "spa": spa, "ble": ble}

    if rec:
        lam = weights

        def back_losses(t: GradientTape):
            if lam.pho:
                for f, (u, colors, idx) in enumerate(records):
                    if len(idx) == 0:
                        continue
                    val, dx, dy = sample_image_with_grad(frames[f].image, u[idx])
                    g = 2.0 * lam.pho * pho_scale * (val - colors[idx])
                    gc = np.zeros((nv, 3))
                    gc[idx] = -g
                    t.accumulate(("c", f), gc)
                    gu = np.zeros((nv, 2))
                    gu[idx, 0] = np.sum(g * dx, axis=1)
                    gu[idx, 1] = np.sum(g * dy, axis=1)
                    t.accumulate(("u", f), gu)
            if lam.lan:
                for f, (u, _, _) in enumerate(records):
                    ls = frames[f].landmarks
                    d = ls.positions - u[lmk]
                    gu = np.zeros((nv, 2))
                    np.add.at(gu, lmk, -2.0 * lam.lan * lan_scale * ls.confidences[:, None] * d)
                    t.accumulate(("u", f), gu)
            if lam.smo:
                g = 2.0 * lam.smo * (model.node_pair_difference.T @ d_nodes)
                t.accumulate("dg", g.ravel())
            if lam.spa:
                coef = sparsity_weights * sparsity.p * q ** (sparsity.p / 2 - 1)
                t.accumulate("albedo", lam.spa * (model.vertex_pair_difference.T @ (coef[:, None] * d_alb)))
            if lam.ble:
                t.accumulate("delta", 2.0 * lam.ble * delta / sig**2)
        tape.record("losses", back_losses)

    return ForwardResult(terms, visible, cells, count)


def _chroma_from(albedo: np.ndarray, model: FaceModel, cfg: SparsityConfig) -> np.ndarray:
    h = albedo / (albedo.sum(axis=1, keepdims=True) + cfg.eps_chroma)
    pairs = model.vertex_pairs
    return np.exp(-cfg.eta * np.linalg.norm(h[pairs[:, 0]] - h[pairs[:, 1]], axis=1))


def _frame_backward(f, model, v, n, r, w, v_cam, n_cam, u, front, h, gam, irr, albedo, intr):
    mesh = model.mesh
    nv = len(v)

    def back(t: GradientTape):
        gu = t.grad(("u", f))
        gc = t.grad(("c", f))
        g_vcam = np.zeros((nv, 3))
        g_ncam = np.zeros((nv, 3))
        if gu is not None:
            z = np.where(front, v_cam[:, 2], 1.0)
            g_vcam[:, 0] = gu[:, 0] * intr.fx / z
            g_vcam[:, 1] = gu[:, 1] * intr.fy / z
            g_vcam[:, 2] = np.where(
                front, -(gu[:, 0] * intr.fx * v_cam[:, 0] + gu[:, 1] * intr.fy * v_cam[:, 1]) / z**2, 0.0)
        if gc is not None:
            t.accumulate("albedo", gc * irr)
            g_irr = gc * albedo
            t.accumulate(("gamma", f), h.T @ g_irr)
            g_h = g_irr @ gam.T
            g_ncam = np.einsum("vk,vkd->vd", g_h, sh_basis_grad(n_cam))
        if gu is None and gc is None:
            return
        t.accumulate(("translation", f), g_vcam.sum(axis=0))
        g_r = g_vcam.T @ v + g_ncam.T @ n
        jac = rotation_jacobian(w, r)
        t.accumulate(("rotation", f), np.einsum("ijk,jk->i", jac, g_r))
        g_v = g_vcam @ r + _normals_backward(mesh, v, n, g_ncam @ r)
        t.accumulate(("delta", f), model.blendshapes.T @ g_v.ravel())
        t.accumulate("base", g_v.ravel())

    return back


def _normals_backward(mesh, v: np.ndarray, n: np.ndarray, g_n: np.ndarray) -> np.ndarray:
    f = mesh.faces
    e1 = v[f[:, 1]] - v[f[:, 0]]
    e2 = v[f[:, 2]] - v[f[:, 0]]
    raw = mesh.vertex_face_incidence @ np.cross(e1, e2)
    norm = np.linalg.norm(raw, axis=1)
    ok = norm > 1e-12
    g_raw = np.zeros_like(raw)
    proj = g_n - n * np.sum(n * g_n, axis=1, keepdims=True)
    g_raw[ok] = proj[ok] / norm[ok, None]
    g_cross = mesh.vertex_face_incidence.T @ g_raw
    g_e1 = np.cross(e2, g_cross)
    g_e2 = np.cross(g_cross, e1)
    s0, s1, s2 = mesh.corner_scatter
    return s1 @ g_e1 + s2 @ g_e2 - s0 @ (g_e1 + g_e2)


def _collect(params: ParamVector, tape: GradientTape) -> np.ndarray:
    grad = np.zeros(len(params.data))
    nf = params.n_frames
    for name, b in params.blocks.items():
        if not params.active[name]:
            continue
        if name in ("rotation", "translation", "gamma", "delta"):
            parts = []
            for f in range(nf):
                g = tape.grad((name, f))
                parts.append(np.zeros(b.shape[1:]) if g is None else g.ravel())
            g = np.stack(parts)
            if name == "delta" and tape.grad("delta") is not None:
                g = g + tape.grad("delta")
        else:
            g = tape.grad(name)
            if g is None:
                g = np.zeros(b.shape)
        grad[b.slice] = np.asarray(g).ravel()
    return grad


def _check_finite(params: ParamVector, values: np.ndarray, what: str) -> None:
    for name, b in params.blocks.items():
        if not np.all(np.isfinite(values[b.slice])):
            raise AutodiffError(f"non-finite {what} in block {name!r}")


def evaluate(model, sample, params: ParamVector, weights: LossWeights, **kw) -> LossBreakdown:
    res = forward(model, sample, params, weights, **kw)
    return LossBreakdown.combine(res.terms, weights)


def evaluate_with_gradient(
    model: FaceModel,
    sample,
    params: ParamVector,
    weights: LossWeights,
    *,
    intr: CameraIntrinsics | None = None,
    sparsity_weights: np.ndarray | None = None,
    sparsity: SparsityConfig = SparsityConfig(),
) -> tuple[LossBreakdown, np.ndarray]:
    """Total loss and its gradient aligned with ``params.data`` (zero on frozen blocks).

    Visibility and the sparsity weights are treated as constants.
    """
    _check_finite(params, params.data, "parameter")
    tape = GradientTape()
    res = forward(model, sample, params, weights, intr=intr, sparsity_weights=sparsity_weights,
                  sparsity=sparsity, tape=tape)
    loss = LossBreakdown.combine(res.terms, weights)
    if not np.isfinite(loss.total):
        bad = next(k for k in LossBreakdown.TERMS if not np.isfinite(res.terms[k]))
        raise AutodiffError(f"non-finite loss term {bad!r}")
    tape.backward()
    grad = _collect(params, tape)
    tape.clear()
    _check_finite(params, grad, "gradient")
    return loss, grad


@dataclass
class CoordinateReport:
    index: int
    analytic: float
    numeric: float
    rel_error: float
    skipped: str | None = None


@dataclass
class GradCheckReport:
    block: str
    coordinates: list[CoordinateReport]
    tolerance: float
    term: str | None = None

    @property
    def checked(self) -> list[CoordinateReport]:
        return [c for c in self.coordinates if c.skipped is None]

    @property
    def n_skipped(self) -> int:
        return sum(c.skipped is not None for c in self.coordinates)

    @property
    def max_rel_error(self) -> float:
        return max((c.rel_error for c in self.checked), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def finite_difference_check(
    model: FaceModel,
    sample,
    params: ParamVector,
    block: str,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    *,
    weights: LossWeights = LossWeights(),
    term: str | None = None,
    coords=None,
    max_coords: int | None = None,
    seed: int = 0,
    intr: CameraIntrinsics | None = None,
    sparsity: SparsityConfig = SparsityConfig(),
) -> GradCheckReport:
    """Compare tape gradients with central differences, coordinate by coordinate.

    Coordinates whose perturbation changes the visible set or moves a sampled
    position into another bilinear cell are reported as skipped. With ``term``
    only that loss term (unit weight) is checked.
    """
    if block not in params or not params.is_active(block):
        raise AutodiffError(f"block {block!r} is not active")
    if term is not None:
        weights = LossWeights.single(term, weights.normalize)
    intr = default_intrinsics(sample) if intr is None else intr
    # the sparsity weights are frozen at the base point, as during optimization
    alb = (_model_block(params, model, "appear_mean")
           + _model_block(params, model, "appear_basis") @ params["beta"]).reshape(-1, 3)
    spw = _chroma_from(alb, model, sparsity)
    kw = dict(intr=intr, sparsity_weights=spw, sparsity=sparsity)
    _, grad = evaluate_with_gradient(model, sample, params, weights, **kw)
    base = forward(model, sample, params, weights, **kw)
    b = params.blocks[block]
    if coords is None:
        coords = np.arange(b.size)
        if max_coords is not None and max_coords < b.size:
            coords = np.sort(np.random.default_rng(seed).choice(b.size, max_coords, replace=False))
    out = []
    work = params.copy()
    for c in np.asarray(coords, dtype=np.int64):
        i = b.start + int(c)
        x0 = work.data[i]
        vals = []
        skipped = None
        for sgn in (1.0, -1.0):
            work.data[i] = x0 + sgn * step
            res = forward(model, sample, work, weights, **kw)
            if skipped is None:
                skipped = _event(base, res)
            vals.append(LossBreakdown.combine(res.terms, weights).total)
        work.data[i] = x0
        num = (vals[0] - vals[1]) / (2 * step)
        ana = float(grad[i])
        rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
        out.append(CoordinateReport(int(c), ana, num, rel, skipped))
    return GradCheckReport(block, out, tolerance, term)


def _event(base: ForwardResult, res: ForwardResult) -> str | None:
    for v0, v1 in zip(base.visible, res.visible):
        if not np.array_equal(v0, v1):
            return "skipped: discrete event (visibility)"
    for c0, c1 in zip(base.cells, res.cells):
        if not np.array_equal(c0, c1):
            return "skipped: discrete event (bilinear cell)"
    return None
