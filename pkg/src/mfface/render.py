"""Image formation: pose, perspective camera, SH shading, visibility, sampling."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

NEAR = 0.01
N_SH = 9


class RenderError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise RenderError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise RenderError("principal point outside the image")

    @classmethod
    def default(cls, width: int = 128, height: int | None = None) -> "CameraIntrinsics":
        height = width if height is None else height
        f = 1.2 * width
        return cls(f, f, width / 2.0, height / 2.0, width, height)


def _skew(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v)
    z = np.zeros(v.shape[:-1])
    return np.stack([
        np.stack([z, -v[..., 2], v[..., 1]], -1),
        np.stack([v[..., 2], z, -v[..., 0]], -1),
        np.stack([-v[..., 1], v[..., 0], z], -1),
    ], -2)


def rotation_matrix(rotation: np.ndarray) -> np.ndarray:
    """Exponential map of axis-angle vectors, shape (..., 3) -> (..., 3, 3)."""
    w = np.asarray(rotation, dtype=np.float64)
    theta = np.linalg.norm(w, axis=-1)[..., None, None]
    k = _skew(w)
    small = theta < 1e-10
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0, np.sin(safe) / safe)
    b = np.where(small, 0.5, (1.0 - np.cos(safe)) / safe**2)
    return np.eye(3) + a * k + b * (k @ k)


def rotation_jacobian(rotation: np.ndarray, rot_mat: np.ndarray | None = None) -> np.ndarray:
    """dR/dw_i for each axis-angle component; shape (..., 3, 3, 3), index i first.

    Uses dR/dw_i = (w_i [w]x + [w x (I - R) e_i]x) R / |w|^2, and [e_i]x at w = 0.
    """
    w = np.asarray(rotation, dtype=np.float64)
    r = rotation_matrix(w) if rot_mat is None else rot_mat
    theta2 = np.sum(w * w, axis=-1)
    eye = np.eye(3)
    out = np.empty(w.shape[:-1] + (3, 3, 3))
    small = theta2 < 1e-20
    for i in range(3):
        e = eye[i]
        col = np.einsum("...jk,k->...j", eye - r, e)
        inner = _skew(np.cross(w, col))
        num = w[..., i, None, None] * _skew(w) + inner
        safe = np.where(small, 1.0, theta2)[..., None, None]
        gen = (num @ r) / safe
        out[..., i, :, :] = np.where(small[..., None, None], _skew(e), gen)
    return out


def rigid_transform(v: np.ndarray, rotation: np.ndarray, translation: np.ndarray) -> np.ndarray:
    r = rotation_matrix(rotation)
    return np.asarray(v, dtype=np.float64) @ r.T + np.asarray(translation, dtype=np.float64)


def project(v_cam: np.ndarray, intr: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Perspective projection; returns (u, in_front) where in_front marks z > NEAR."""
    v = np.asarray(v_cam, dtype=np.float64)
    z = v[..., 2]
    front = z > NEAR
    zs = np.where(front, z, 1.0)
    u = np.stack([intr.fx * v[..., 0] / zs + intr.cx, intr.fy * v[..., 1] / zs + intr.cy], -1)
    return u, front


def sh_basis(n: np.ndarray, check: bool = True) -> np.ndarray:
    n = np.asarray(n, dtype=np.float64)
    if check and np.any(np.abs(np.linalg.norm(n, axis=-1) - 1.0) > 1e-6):
        raise RenderError("sh_basis needs unit normals")
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    return np.stack([np.ones_like(x), y, z, x, x * y, y * z, 3 * z * z - 1, x * z, x * x - y * y], -1)


def sh_basis_grad(n: np.ndarray) -> np.ndarray:
    """dH/dn with shape (..., 9, 3)."""
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    zero, one = np.zeros_like(x), np.ones_like(x)
    dx = np.stack([zero, zero, zero, one, y, zero, zero, z, 2 * x], -1)
    dy = np.stack([zero, one, zero, zero, x, z, zero, zero, -2 * y], -1)
    dz = np.stack([zero, zero, one, zero, zero, y, 6 * z, x, zero], -1)
    return np.stack([dx, dy, dz], -1)


def shade(albedo: np.ndarray, normals: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    """Lambertian SH shading; gamma holds 9 bands x 3 channels, band-major."""
    h = sh_basis(normals, check=False)
    irradiance = h @ np.asarray(gamma, dtype=np.float64).reshape(N_SH, 3)
    return np.asarray(albedo, dtype=np.float64) * irradiance


def in_image(u: np.ndarray, intr: CameraIntrinsics, margin: float = 1.0) -> np.ndarray:
    return (
        (u[..., 0] >= margin) & (u[..., 0] <= intr.width - margin)
        & (u[..., 1] >= margin) & (u[..., 1] <= intr.height - margin)
    )


def visible_set(v_cam: np.ndarray, n_cam: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Boolean mask of vertices that face the camera and project inside the image."""
    facing = np.sum(v_cam * n_cam, axis=-1) < 0
    u, front = project(v_cam, intr)
    return facing & front & in_image(u, intr)


def _bilinear_setup(shape: tuple[int, int], u: np.ndarray):
    h, w = shape
    x = u[..., 0] - 0.5
    y = u[..., 1] - 0.5
    x0 = np.clip(np.floor(x), 0, w - 1).astype(np.int64)
    y0 = np.clip(np.floor(y), 0, h - 1).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    return x - x0, y - y0, x0, x1, y0, y1


def sample_image(image: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Bilinear lookup with pixel centres at integer + 0.5."""
    img = np.asarray(image)
    u = np.asarray(u, dtype=np.float64)
    h, w = img.shape[:2]
    if np.any(u[..., 0] < 0.5) or np.any(u[..., 0] > w - 0.5) or np.any(u[..., 1] < 0.5) or np.any(u[..., 1] > h - 0.5):
        raise RenderError("sample position outside the image")
    return _bilinear(img, u)[0]


def _bilinear(img: np.ndarray, u: np.ndarray):
    a, b, x0, x1, y0, y1 = _bilinear_setup(img.shape[:2], u)
    p00, p10 = img[y0, x0], img[y0, x1]
    p01, p11 = img[y1, x0], img[y1, x1]
    a, b = a[..., None], b[..., None]
    top = p00 + a * (p10 - p00)
    bot = p01 + a * (p11 - p01)
    val = top + b * (bot - top)
    dx = (1 - b) * (p10 - p00) + b * (p11 - p01)
    dy = bot - top
    return val, dx, dy, (x0, y0)


def sample_image_with_grad(image: np.ndarray, u: np.ndarray):
    """Returns (value, d/du_x, d/du_y); no bounds check, coordinates are clamped."""
    val, dx, dy, _ = _bilinear(np.asarray(image), np.asarray(u, dtype=np.float64))
    return val, dx, dy


def bilinear_cells(shape: tuple[int, int], u: np.ndarray) -> np.ndarray:
    """Integer cell ids of the bilinear stencil (used to detect cell crossings)."""
    _, _, x0, _, y0, _ = _bilinear_setup(shape, u)
    return y0 * shape[1] + x0


@dataclass
class VertexRecords:
    u: np.ndarray
    colors: np.ndarray
    visible: np.ndarray
    v_cam: np.ndarray
    n_cam: np.ndarray
    albedo: np.ndarray


def render_vertices(model, identity, frame, intr: CameraIntrinsics) -> VertexRecords:
    from .mesh import compute_vertex_normals
    from .model import assemble_appearance, assemble_vertices

    v = assemble_vertices(model, identity.alpha, frame.delta).reshape(-1, 3)
    n = compute_vertex_normals(model.mesh, v)
    r = rotation_matrix(frame.rotation)
    v_cam = v @ r.T + frame.translation
    n_cam = n @ r.T
    vis = visible_set(v_cam, n_cam, intr)
    u, _ = project(v_cam, intr)
    albedo = assemble_appearance(model, identity.beta).reshape(-1, 3)
    colors = shade(albedo, n_cam, frame.gamma)
    return VertexRecords(u, colors, vis, v_cam, n_cam, albedo)


def _cross2(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def _seg_closest(p, a, b):
    """Distance from p to segment ab and the clamped parameter of the closest point."""
    ab = b - a
    t = np.clip(np.sum((p - a) * ab, -1) / np.maximum(np.sum(ab * ab, -1), 1e-300), 0.0, 1.0)
    return np.linalg.norm(p - (a + t[..., None] * ab), axis=-1), t


def rasterize_preview(
    records: VertexRecords,
    faces: np.ndarray,
    size: tuple[int, int],
    background=0.5,
    colors: np.ndarray | None = None,
    pad: float = 1.5,
    return_depth: bool = False,
):
    """Z-buffered Gouraud rasterisation of front-facing triangles.

    Background pixels within ``pad`` pixels of a drawn triangle take the
    colour of the closest point on that triangle, so bilinear lookups at
    silhouette vertices do not blend in the background. With
    ``return_depth`` the camera depth of each covered pixel centre (inf
    elsewhere) is returned as well.
    """
    width, height = size
    img = np.empty((height, width, 3))
    img[:] = np.asarray(background, dtype=np.float64)
    depth = np.full(height * width, np.inf)
    done = (lambda im: (im, depth.reshape(height, width))) if return_depth else (lambda im: im)
    col = records.colors if colors is None else colors
    xc = records.v_cam
    faces = np.asarray(faces)
    p = records.u[faces]
    z = xc[faces, 2]
    tri_n = np.cross(xc[faces[:, 1]] - xc[faces[:, 0]], xc[faces[:, 2]] - xc[faces[:, 0]])
    area = _cross2(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    keep = (np.sum(tri_n * xc[faces[:, 0]], -1) < 0) & np.all(z > NEAR, 1) & (np.abs(area) > 1e-12)
    tri = np.nonzero(keep)[0]
    if len(tri) == 0:
        return done(img)
    p, z, area = p[tri], z[tri], area[tri]
    lo = np.clip(np.ceil(p.min(1) - pad - 0.5), 0, [width - 1, height - 1]).astype(np.int64)
    hi = np.clip(np.floor(p.max(1) + pad - 0.5), -1, [width - 1, height - 1]).astype(np.int64)
    nx = np.maximum(hi[:, 0] - lo[:, 0] + 1, 0)
    ny = np.maximum(hi[:, 1] - lo[:, 1] + 1, 0)
    counts = nx * ny
    total = int(counts.sum())
    if total == 0:
        return done(img)
    owner = np.repeat(np.arange(len(tri)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    px = lo[owner, 0] + local % nx[owner]
    py = lo[owner, 1] + local // nx[owner]
    q = np.stack([px + 0.5, py + 0.5], -1)
    a, b, c = p[owner, 0], p[owner, 1], p[owner, 2]
    w0 = _cross2(b - q, c - q) / area[owner]
    w1 = _cross2(c - q, a - q) / area[owner]
    w2 = 1.0 - w0 - w1
    wts = np.stack([w0, w1, w2], -1)
    inv_z = np.sum(wts / z[owner], -1)
    pix = py * width + px
    inside = np.all(wts >= -1e-9, -1)
    shaded = np.einsum("nk,nkc->nc", wts, col[faces[tri[owner]]])

    covered = np.zeros(height * width, dtype=bool)
    flat = img.reshape(-1, 3)
    idx = np.nonzero(inside)[0]
    if len(idx):
        order = np.lexsort((owner[idx], -inv_z[idx], pix[idx]))
        sel = idx[order]
        _, first = np.unique(pix[sel], return_index=True)
        win = sel[first]
        flat[pix[win]] = shaded[win]
        covered[pix[win]] = True
        depth[pix[win]] = 1.0 / inv_z[win]

    out_idx = np.nonzero(~inside & ~covered[pix])[0]
    if len(out_idx) and pad > 0:
        qq = q[out_idx]
        tri_cols = col[faces[tri[owner[out_idx]]]]
        best_d = np.full(len(out_idx), np.inf)
        best_c = np.zeros((len(out_idx), 3))
        corners = (a[out_idx], b[out_idx], c[out_idx])
        for k in range(3):
            d, t = _seg_closest(qq, corners[k], corners[(k + 1) % 3])
            ck = tri_cols[:, k] + t[:, None] * (tri_cols[:, (k + 1) % 3] - tri_cols[:, k])
            better = d < best_d
            best_d[better] = d[better]
            best_c[better] = ck[better]
        near = best_d <= pad
        idx = out_idx[near]
        if len(idx):
            order = np.lexsort((owner[idx], -inv_z[idx], best_d[near], pix[idx]))
            sel = np.arange(len(idx))[order]
            _, first = np.unique(pix[idx][sel], return_index=True)
            win = sel[first]
            flat[pix[idx][win]] = best_c[near][win]
    return done(np.clip(img, 0.0, 1.0))


def write_image(path: str | Path, image: np.ndarray) -> None:
    """Write an 8-bit PNG or binary PPM (chosen by suffix)."""
    path = Path(path)
    data = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    fmt = "PPM" if path.suffix.lower() in (".ppm", ".pnm") else "PNG"
    PILImage.fromarray(data, "RGB").save(path, format=fmt)


def read_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image not found: {path}")
    with PILImage.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
