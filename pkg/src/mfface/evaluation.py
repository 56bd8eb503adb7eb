"""Rigid alignment, per-vertex RMSE and reflectance/shading separation metrics."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .render import sh_basis


class EvalError(ValueError):
    pass


def _points(x: np.ndarray, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        if x.size % 3:
            raise EvalError(f"{name}: flat length {x.size} is not a multiple of 3")
        x = x.reshape(-1, 3)
    if x.ndim != 2 or x.shape[1] != 3:
        raise EvalError(f"{name}: expected (n, 3) points, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise EvalError(f"{name}: non-finite coordinates")
    return x


def procrustes_align(source: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotation R and translation t minimizing sum ||R s_i + t - t_i||^2 (no scaling)."""
    s = _points(source, "source")
    d = _points(target, "target")
    if s.shape != d.shape:
        raise EvalError(f"point counts differ: {s.shape[0]} vs {d.shape[0]}")
    if s.shape[0] < 3:
        raise EvalError("alignment needs at least 3 points")
    sc, dc = s.mean(0), d.mean(0)
    s0, d0 = s - sc, d - dc
    scale = max(np.abs(s0).max(), np.abs(d0).max(), 1e-300)
    sv_s = np.linalg.svd(s0, compute_uv=False)
    sv_d = np.linalg.svd(d0, compute_uv=False)
    # a plane still fixes the rotation; a line or a point does not
    if sv_s[1] <= 1e-12 * scale * np.sqrt(len(s)) or sv_d[1] <= 1e-12 * scale * np.sqrt(len(d)):
        raise EvalError("degenerate point set (colinear or coincident); rotation is not unique")
    u, _, vt = np.linalg.svd(d0.T @ s0)
    fix = np.ones(3)
    fix[2] = np.sign(np.linalg.det(u @ vt)) or 1.0
    r = (u * fix) @ vt
    return r, dc - r @ sc


def per_vertex_rmse(reconstruction: np.ndarray, ground_truth: np.ndarray) -> float:
    """RMSE of Euclidean vertex distances after rigidly aligning the reconstruction."""
    a = _points(reconstruction, "reconstruction")
    b = _points(ground_truth, "ground truth")
    if a.shape != b.shape:
        raise EvalError(f"vertex counts differ: {a.shape[0]} vs {b.shape[0]}")
    if np.array_equal(a, b):
        return 0.0
    r, t = procrustes_align(a, b)
    return float(np.sqrt(np.mean(np.sum((a @ r.T + t - b) ** 2, 1))))


@dataclass
class Disentanglement:
    correlation: np.ndarray
    shading_ratio_error: float
    albedo_scale: np.ndarray


def albedo_correlation(recovered: np.ndarray, truth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel Pearson correlation after a least-squares global scale per channel."""
    a = _points(recovered, "recovered albedo")
    b = _points(truth, "ground-truth albedo")
    if a.shape != b.shape:
        raise EvalError(f"albedo sizes differ: {a.shape[0]} vs {b.shape[0]}")
    den = np.sum(a * a, 0)
    scale = np.where(den > 0, np.sum(a * b, 0) / np.where(den > 0, den, 1.0), 0.0)
    aligned = a * scale
    corr = np.zeros(3)
    for c in range(3):
        x = aligned[:, c] - aligned[:, c].mean()
        y = b[:, c] - b[:, c].mean()
        nx, ny = np.linalg.norm(x), np.linalg.norm(y)
        corr[c] = float(x @ y / (nx * ny)) if nx > 0 and ny > 0 else 0.0
    return np.clip(corr, -1.0, 1.0), scale


def shading_ratio_error(normals: np.ndarray, gamma_recovered: np.ndarray, gamma_truth: np.ndarray) -> float:
    """RMSE of irradiance(gamma_rec) / irradiance(gamma_gt) - 1 over the given unit normals."""
    n = _points(normals, "normals")
    if len(n) == 0:
        return 0.0
    h = sh_basis(n)
    rec = h @ np.asarray(gamma_recovered, dtype=np.float64).reshape(9, 3)
    gt = h @ np.asarray(gamma_truth, dtype=np.float64).reshape(9, 3)
    if np.any(np.abs(gt) < 1e-12):
        raise EvalError("ground-truth irradiance vanishes at some normal")
    return float(np.sqrt(np.mean((rec / gt - 1.0) ** 2)))


def disentanglement_metrics(albedo: np.ndarray, albedo_truth: np.ndarray, gamma: np.ndarray,
                            gamma_truth: np.ndarray, normals: np.ndarray) -> Disentanglement:
    corr, scale = albedo_correlation(albedo, albedo_truth)
    return Disentanglement(corr, shading_ratio_error(normals, gamma, gamma_truth), scale)


def _spread(values: np.ndarray) -> float:
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


@dataclass
class EvalReport:
    condition: str
    subjects: list[str]
    rmse: np.ndarray
    diagonal: float
    albedo_corr: np.ndarray | None = None
    extra: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.rmse = np.asarray(self.rmse, dtype=np.float64)
        if len(self.subjects) != len(self.rmse):
            raise EvalError(f"{len(self.subjects)} subjects for {len(self.rmse)} RMSE values")
        if np.any(self.rmse < 0) or not self.diagonal > 0:
            raise EvalError("RMSE must be non-negative and the diagonal positive")
        if self.albedo_corr is not None:
            self.albedo_corr = np.asarray(self.albedo_corr, dtype=np.float64).reshape(len(self.subjects), 3)

    @property
    def rmse_pct(self) -> np.ndarray:
        return 100.0 * self.rmse / self.diagonal

    @property
    def mean(self) -> float:
        return float(np.mean(self.rmse)) if len(self.rmse) else float("nan")

    @property
    def sd(self) -> float:
        return _spread(self.rmse)

    @property
    def median_pct(self) -> float:
        return float(np.median(self.rmse_pct)) if len(self.rmse) else float("nan")

    def median_corr(self) -> np.ndarray:
        if self.albedo_corr is None or not len(self.albedo_corr):
            return np.full(3, np.nan)
        return np.median(self.albedo_corr, 0)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            head = ["condition", "subject", "rmse", "rmse_pct"]
            if self.albedo_corr is not None:
                head += ["corr_r", "corr_g", "corr_b"]
            head += sorted(self.extra)
            w.writerow(head)
            for i, sub in enumerate(self.subjects):
                row = [self.condition, sub, repr(float(self.rmse[i])), repr(float(self.rmse_pct[i]))]
                if self.albedo_corr is not None:
                    row += [repr(float(c)) for c in self.albedo_corr[i]]
                row += [repr(float(self.extra[k][i])) for k in sorted(self.extra)]
                w.writerow(row)


def summary_table(reports: list[EvalReport]) -> str:
    """Mean and SD rows per condition, RMSE in model units and percent of the diagonal."""
    lines = [f"{'condition':<28} {'n':>4} {'mean':>10} {'SD':>10} {'mean %':>8} {'median %':>9} {'albedo corr (r,g,b)':>24}"]
    for rep in reports:
        corr = rep.median_corr()
        ctext = "-" if np.all(np.isnan(corr)) else " ".join(f"{c:.4f}" for c in corr)
        pct = rep.rmse_pct
        mean_pct = float(np.mean(pct)) if len(pct) else float("nan")
        lines.append(f"{rep.condition:<28} {len(rep.rmse):>4} {rep.mean:>10.5f} {rep.sd:>10.5f} "
                     f"{mean_pct:>8.3f} {rep.median_pct:>9.3f} {ctext:>24}")
    return "\n".join(lines)
