"""Procedural desk-scale face assets.

Model space uses camera-style axes: x to the right, y down, and the face looks
towards -z, so the identity pose shows the face to a camera at the origin.
"""
from __future__ import annotations

import numpy as np
from scipy.spatial import Delaunay, cKDTree

from .mesh import Mesh, N_LANDMARKS, compute_vertex_normals
from .model import (
    FaceModel,
    init_model,
    ocl_project,
)

HALF_WIDTH = 0.8
HALF_HEIGHT = 1.0
EXPRESSION_SIGMA = 0.3


def _gauss(x, y, cx, cy, sx, sy):
    return np.exp(-0.5 * (((x - cx) / sx) ** 2 + ((y - cy) / sy) ** 2))


def face_depth(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # shallow base keeps the rim clear of grazing incidence at 45 degrees of yaw
    base = -0.35 * (1.0 - (x / 0.95) ** 2 - (y / 1.2) ** 2)
    nose = -0.12 * _gauss(x, y, 0.0, 0.05, 0.2, 0.28)
    brow = -0.03 * _gauss(x, y, 0.0, -0.4, 0.6, 0.12)
    sockets = 0.025 * (_gauss(x, y, -0.3, -0.22, 0.14, 0.1) + _gauss(x, y, 0.3, -0.22, 0.14, 0.1))
    lips = -0.025 * _gauss(x, y, 0.0, 0.5, 0.2, 0.1)
    chin = -0.03 * _gauss(x, y, 0.0, 0.85, 0.18, 0.14)
    return base + nose + brow + sockets + lips + chin


def make_face_mesh(n_vertices: int = 1000) -> Mesh:
    """Elliptical face mask on a hexagonal grid, roughly ``n_vertices`` vertices."""
    area = np.pi * HALF_WIDTH * HALF_HEIGHT
    h = np.sqrt(area / n_vertices * np.sqrt(3) / 2) * 1.15
    dy = h * np.sqrt(3) / 2
    pts = []
    for r, y in enumerate(np.arange(-HALF_HEIGHT, HALF_HEIGHT + 1e-9, dy)):
        off = 0.5 * h if r % 2 else 0.0
        for x in np.arange(-HALF_WIDTH - off, HALF_WIDTH + h, h) + off:
            if (x / HALF_WIDTH) ** 2 + (y / HALF_HEIGHT) ** 2 <= 1.0:
                pts.append((x, y))
    pts = np.array(pts)
    tri = Delaunay(pts).simplices
    e = np.linalg.norm(pts[tri] - pts[np.roll(tri, 1, axis=1)], axis=2)
    tri = tri[e.max(1) < 1.6 * h]
    used = np.unique(tri)
    remap = np.full(len(pts), -1)
    remap[used] = np.arange(len(used))
    pts, tri = pts[used], remap[tri]
    v = np.column_stack([pts, face_depth(pts[:, 0], pts[:, 1])])
    v -= 0.5 * (v.max(0) + v.min(0))
    n = np.cross(v[tri[:, 1]] - v[tri[:, 0]], v[tri[:, 2]] - v[tri[:, 0]])
    flip = n[:, 2] > 0
    tri[flip] = tri[flip][:, ::-1]
    mesh = Mesh(v, tri)
    mesh.landmark_vertex_indices = pick_landmarks(mesh, pts - 0.5 * (pts.max(0) + pts.min(0)))
    return mesh


def landmark_template() -> np.ndarray:
    """66 canonical 2D feature locations (jaw, brows, nose, eyes, mouth)."""
    phi = np.radians(np.linspace(190.0, -10.0, 17))
    jaw = np.column_stack([0.92 * HALF_WIDTH * np.cos(phi), 0.92 * HALF_HEIGHT * np.sin(phi)])
    bx = np.linspace(-0.55, -0.12, 5)
    brow_l = np.column_stack([bx, -0.42 - 0.05 * np.sin(np.linspace(0, np.pi, 5))])
    brow_r = brow_l[::-1] * [-1, 1]
    bridge = np.column_stack([np.zeros(4), np.linspace(-0.22, 0.08, 4)])
    nostrils = np.column_stack([np.linspace(-0.15, 0.15, 5), np.full(5, 0.22)])
    t = np.radians(np.arange(0, 360, 60) + 180)
    eye_l = np.column_stack([-0.3 + 0.13 * np.cos(t), -0.22 + 0.05 * np.sin(t)])
    eye_r = eye_l * [-1, 1]
    to = np.radians(np.arange(0, 360, 30) + 180)
    mouth_o = np.column_stack([0.26 * np.cos(to), 0.5 + 0.1 * np.sin(to)])
    ti = np.radians([215, 270, 325, 35, 90, 145])
    mouth_i = np.column_stack([0.18 * np.cos(ti), 0.5 + 0.045 * np.sin(ti)])
    out = np.concatenate([jaw, brow_l, brow_r, bridge, nostrils, eye_l, eye_r, mouth_o, mouth_i])
    assert len(out) == N_LANDMARKS
    return out


def pick_landmarks(mesh: Mesh, planar: np.ndarray) -> np.ndarray:
    tree = cKDTree(planar)
    used: set[int] = set()
    out = []
    for p in landmark_template():
        _, cand = tree.query(p, k=min(12, len(planar)))
        pick = next(int(c) for c in np.atleast_1d(cand) if int(c) not in used)
        used.add(pick)
        out.append(pick)
    return np.array(out, dtype=np.int64)


def make_blendshapes(mesh: Mesh) -> tuple[np.ndarray, np.ndarray]:
    """Eight smooth expression displacement fields and their sampling sigmas."""
    v = mesh.vertices
    x, y = v[:, 0], v[:, 1]
    fields = []

    def add(dx, dy, dz):
        fields.append(np.column_stack([dx, dy, dz]).ravel())

    jaw = 1.0 / (1.0 + np.exp(-(y - 0.45) / 0.2))
    add(np.zeros_like(x), 0.08 * jaw, -0.02 * jaw)
    corners = _gauss(x, y, -0.25, 0.5, 0.12, 0.1), _gauss(x, y, 0.25, 0.5, 0.12, 0.1)
    add(0.05 * (corners[1] - corners[0]), -0.05 * (corners[0] + corners[1]), np.zeros_like(x))
    mouth = _gauss(x, y, 0.0, 0.5, 0.22, 0.12)
    add(-0.25 * x * mouth, np.zeros_like(x), -0.05 * mouth)
    brows = _gauss(x, y, -0.32, -0.42, 0.18, 0.1) + _gauss(x, y, 0.32, -0.42, 0.18, 0.1)
    add(np.zeros_like(x), -0.06 * brows, np.zeros_like(x))
    inner = _gauss(x, y, -0.15, -0.4, 0.1, 0.1), _gauss(x, y, 0.15, -0.4, 0.1, 0.1)
    add(0.04 * (inner[0] - inner[1]), 0.03 * (inner[0] + inner[1]), np.zeros_like(x))
    cheeks = _gauss(x, y, -0.45, 0.3, 0.15, 0.15), _gauss(x, y, 0.45, 0.3, 0.15, 0.15)
    add(0.04 * (cheeks[1] - cheeks[0]), np.zeros_like(x), -0.03 * (cheeks[0] + cheeks[1]))
    lids = _gauss(x, y, -0.3, -0.27, 0.14, 0.05) + _gauss(x, y, 0.3, -0.27, 0.14, 0.05)
    add(np.zeros_like(x), 0.03 * lids, np.zeros_like(x))
    add(-0.06 * mouth, np.zeros_like(x), np.zeros_like(x))
    return np.column_stack(fields), np.full(len(fields), EXPRESSION_SIGMA)


def _smooth_fields(points: np.ndarray, n: int, rng: np.random.Generator, width: float = 0.5,
                   n_centers: int = 4, depth_gain: float = 1.0) -> np.ndarray:
    """``n`` random smooth 3D fields over ``points``, (3P, n).

    Each field mixes a quadratic polynomial in (x, y) with a few wide Gaussian
    bumps, so its spatial gradient stays small.
    """
    lo, hi = points.min(0), points.max(0)
    xy = (points[:, :2] - 0.5 * (lo[:2] + hi[:2])) / (0.5 * (hi[:2] - lo[:2]))
    x, y = xy[:, 0], xy[:, 1]
    poly = np.column_stack([x, y, x * x - 0.5, y * y - 0.5, x * y])
    cols = []
    for _ in range(n):
        centers = lo[:2] + (hi[:2] - lo[:2]) * rng.random((n_centers, 2))
        d2 = np.sum((points[:, None, :2] - centers[None]) ** 2, -1)
        phi = np.exp(-0.5 * d2 / width**2)
        field = poly @ rng.normal(size=(5, 3)) + phi @ rng.normal(size=(n_centers, 3))
        field[:, 2] *= depth_gain
        cols.append(field.ravel())
    return np.column_stack(cols)


def _remove_rigid(fields: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Subtract from each (3P,) column its least-squares infinitesimal rigid motion t + w x p."""
    p = points - points.mean(axis=0)
    n = len(p)
    rigid = np.zeros((n, 3, 6))
    rigid[:, :, :3] = np.eye(3)
    # w x p = -[p]x w
    rigid[:, 0, 4], rigid[:, 0, 5] = p[:, 2], -p[:, 1]
    rigid[:, 1, 3], rigid[:, 1, 5] = -p[:, 2], p[:, 0]
    rigid[:, 2, 3], rigid[:, 2, 4] = p[:, 1], -p[:, 0]
    a = rigid.reshape(3 * n, 6)
    coef, *_ = np.linalg.lstsq(a, fields, rcond=None)
    return fields - a @ coef


def _fold_free_scale(mesh: Mesh, disp: np.ndarray, reach: float = 3.0, keep: float = 0.2,
                     max_tilt_deg: float = 40.0) -> float:
    """Largest s such that vertices + t*s*disp, |t| <= reach, keeps every
    triangle's projected area above ``keep`` of its rest area and tilts no
    vertex normal by more than ``max_tilt_deg``.

    The tilt bound keeps the surface free of ridges that would hide
    front-facing vertices at large yaw.
    """
    f = mesh.faces
    v = mesh.vertices
    n0 = compute_vertex_normals(mesh)
    cos_min = np.cos(np.radians(max_tilt_deg))

    def area(x):
        e1, e2 = x[f[:, 1]] - x[f[:, 0]], x[f[:, 2]] - x[f[:, 0]]
        return e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]

    a0 = area(v)
    # projected area is quadratic in the step: a0 + t b + t^2 c
    b = 0.5 * (area(v + disp) - area(v - disp))
    c = 0.5 * (area(v + disp) + area(v - disp)) - a0
    ts = np.linspace(-reach, reach, 61)

    def ok(s):
        t = ts[:, None] * s
        if not np.all((a0 + t * b + t * t * c) / a0 >= keep):
            return False
        for tt in (-reach * s, reach * s):
            n = compute_vertex_normals(mesh, v + tt * disp)
            if np.min(np.sum(n * n0, 1)) < cos_min:
                return False
        return True

    lo, hi = 0.0, 1.0
    while ok(hi):
        hi *= 2.0
        if hi > 1e6:
            return hi
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if ok(mid) else (lo, mid)
    return lo


def make_gt_model(
    mesh: Mesh,
    blendshapes: np.ndarray,
    sigmas: np.ndarray,
    *,
    node_count: int = 100,
    n_identity: int = 8,
    n_appearance: int = 8,
    identity_scale: float = 0.05,
    mode_decay: float = 0.9,
    appearance_scale: float = 0.05,
    seed: int = 1234,
) -> FaceModel:
    """A structured 'true' face model used to synthesise training data.

    Identity modes are smooth graph fields projected off the blendshapes and
    scaled so that mode k moves vertices by at most ``identity_scale * diag *
    mode_decay**k`` RMS, less where a larger amplitude would fold the mesh.
    Appearance is a structured skin map with smooth colour modes.
    """
    base = init_model(mesh, blendshapes, sigmas, node_count=node_count, n_identity=n_identity,
                      n_appearance=n_appearance, seed=seed)
    rng = np.random.default_rng(seed)
    nodes = base.mean_graph.reshape(-1, 3)
    fields = _remove_rigid(_smooth_fields(nodes, n_identity, rng, depth_gain=2.0), nodes)
    theta = ocl_project(fields, base.graph_blendshapes)
    diag = mesh.bbox_diagonal()
    for k in range(n_identity):
        disp = base.skinning.apply(theta[:, k])
        rms = np.sqrt(np.mean(np.sum(disp**2, 1)))
        scale = identity_scale * diag * mode_decay**k / rms
        theta[:, k] *= min(scale, _fold_free_scale(mesh, disp))
    base.geom_basis = theta

    v = mesh.vertices
    x, y = v[:, 0], v[:, 1]
    skin = np.array([0.70, 0.50, 0.40])
    r = np.tile(skin, (len(v), 1))
    lips = _gauss(x, y, 0.0, 0.5, 0.22, 0.09)[:, None]
    r += lips * (np.array([0.72, 0.32, 0.32]) - skin)
    brows = (_gauss(x, y, -0.32, -0.43, 0.17, 0.08) + _gauss(x, y, 0.32, -0.43, 0.17, 0.08))[:, None]
    r += brows * (np.array([0.35, 0.25, 0.20]) - skin)
    eyes = (_gauss(x, y, -0.3, -0.22, 0.1, 0.07) + _gauss(x, y, 0.3, -0.22, 0.1, 0.07))[:, None]
    r += eyes * (np.array([0.45, 0.40, 0.38]) - skin)
    cheeks = (_gauss(x, y, -0.42, 0.2, 0.15, 0.15) + _gauss(x, y, 0.42, 0.2, 0.15, 0.15))[:, None]
    r += cheeks * np.array([0.06, -0.02, -0.02])
    base.appear_mean = r.ravel()

    modes = [np.tile([1.0, 0.8, 0.7], len(v))]  # overall tone
    modes.append(np.tile([1.0, -0.5, -0.5], len(v)) * np.repeat(_gauss(x, y, 0, 0.2, 0.5, 0.6), 3))
    smooth = _smooth_fields(v, n_appearance - 2, rng, width=0.3)
    modes.extend(smooth.T)
    theta_a = np.column_stack(modes[:n_appearance])
    theta_a /= np.sqrt(np.mean(theta_a**2, axis=0))
    base.appear_basis = appearance_scale * theta_a
    return base


def make_toy_assets(n_vertices: int = 1000) -> tuple[Mesh, np.ndarray, np.ndarray]:
    mesh = make_face_mesh(n_vertices)
    blend, sig = make_blendshapes(mesh)
    return mesh, blend, sig
