"""Loss terms evaluated on one multi-frame sample (forward only).

These are the reference implementations; the fused gradient path in
:mod:`mfface.autodiff` must reproduce them.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .mesh import N_LANDMARKS
from .model import FaceModel, IdentityParams, FrameParams, assemble_appearance
from .render import CameraIntrinsics, VertexRecords, render_vertices, sample_image


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    pho: float = 1.0
    lan: float = 0.5
    smo: float = 10.0
    spa: float = 0.02
    ble: float = 0.001
    normalize: bool = True

    def __post_init__(self):
        for name in ("pho", "lan", "smo", "spa", "ble"):
            if getattr(self, name) < 0:
                raise LossError(f"loss weight {name} must be nonnegative")
        if self.pho <= 0 and self.lan <= 0:
            raise LossError("at least one of the data-term weights must be positive")

    def as_array(self) -> np.ndarray:
        return np.array([self.pho, self.lan, self.smo, self.spa, self.ble])

    @classmethod
    def single(cls, term: str, normalize: bool = True) -> "LossWeights":
        """Unit weight on one term, zero elsewhere.

        Meant for checking one term in isolation; it skips the data-term
        requirement, so it is not a training configuration.
        """
        if term not in ("pho", "lan", "smo", "spa", "ble"):
            raise LossError(f"unknown loss term {term!r}")
        out = object.__new__(cls)
        for name in ("pho", "lan", "smo", "spa", "ble"):
            object.__setattr__(out, name, 1.0 if name == term else 0.0)
        object.__setattr__(out, "normalize", normalize)
        return out


@dataclass(frozen=True)
class SparsityConfig:
    eta: float = 80.0
    p: float = 0.9
    eps_chroma: float = 1e-4
    eps_norm: float = 1e-6

    def __post_init__(self):
        if self.eta <= 0 or not 0 < self.p <= 2:
            raise LossError("sparsity config needs eta > 0 and 0 < p <= 2")


@dataclass
class LandmarkSet:
    positions: np.ndarray
    confidences: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)
        self.confidences = np.asarray(self.confidences, dtype=np.float64).ravel()
        if len(self.positions) != N_LANDMARKS or len(self.confidences) != N_LANDMARKS:
            raise LossError(f"expected {N_LANDMARKS} landmarks, got {len(self.positions)}")
        if np.any(self.confidences < 0) or np.any(self.confidences > 1):
            raise LossError("landmark confidences must lie in [0, 1]")


@dataclass
class LossBreakdown:
    pho: float = 0.0
    lan: float = 0.0
    smo: float = 0.0
    spa: float = 0.0
    ble: float = 0.0
    total: float = 0.0

    TERMS = ("pho", "lan", "smo", "spa", "ble")

    @classmethod
    def combine(cls, terms: dict[str, float], weights: LossWeights) -> "LossBreakdown":
        total = 0.0
        for name in cls.TERMS:
            total += getattr(weights, name) * terms[name]
        return cls(total=total, **{k: float(terms[k]) for k in cls.TERMS})

    def __add__(self, other: "LossBreakdown") -> "LossBreakdown":
        return LossBreakdown(**{f.name: getattr(self, f.name) + getattr(other, f.name) for f in fields(self)})

    def as_row(self) -> list[float]:
        return [self.pho, self.lan, self.smo, self.spa, self.ble, self.total]


def photometric_loss(images, records: list[VertexRecords], normalize: bool = True) -> float:
    total, count = 0.0, 0
    for img, rec in zip(images, records):
        idx = np.nonzero(rec.visible)[0]
        if len(idx) == 0:
            continue
        diff = sample_image(img, rec.u[idx]) - rec.colors[idx]
        total += float(np.sum(diff * diff))
        count += len(idx)
    if count == 0:
        raise LossError("model invisible: no visible vertex in any frame")
    return total / count if normalize else total


def landmark_loss(landmarks: list[LandmarkSet], projections: list[np.ndarray], normalize: bool = True) -> float:
    total = 0.0
    for lm, u in zip(landmarks, projections):
        d = lm.positions - u
        total += float(np.sum(lm.confidences * np.sum(d * d, axis=1)))
    return total / (len(landmarks) * N_LANDMARKS) if normalize else total


def smoothness_loss(model: FaceModel, alpha: np.ndarray) -> float:
    t = (model.projected_basis() @ alpha).reshape(-1, 3)
    pairs = model.node_pairs
    d = t[pairs[:, 0]] - t[pairs[:, 1]]
    return float(np.sum(d * d))


def chroma_weights(model: FaceModel, beta_old: np.ndarray, config: SparsityConfig = SparsityConfig()) -> np.ndarray:
    """Per ordered vertex pair weights exp(-eta |h_i - h_j|), frozen between refreshes.

    The chroma is taken from the albedo shaded by unit white ambient light,
    which makes the weights independent of the per-frame illumination.
    """
    c = assemble_appearance(model, beta_old).reshape(-1, 3)
    h = c / (c.sum(axis=1, keepdims=True) + config.eps_chroma)
    pairs = model.vertex_pairs
    return np.exp(-config.eta * np.linalg.norm(h[pairs[:, 0]] - h[pairs[:, 1]], axis=1))


def sparsity_loss(model: FaceModel, beta: np.ndarray, weights: np.ndarray,
                  config: SparsityConfig = SparsityConfig()) -> float:
    r = assemble_appearance(model, beta).reshape(-1, 3)
    pairs = model.vertex_pairs
    d = r[pairs[:, 0]] - r[pairs[:, 1]]
    q = np.sum(d * d, axis=1) + config.eps_norm**2
    return float(np.sum(weights * q ** (config.p / 2)))


def expression_reg(deltas: list[np.ndarray], sigmas: np.ndarray) -> float:
    return float(sum(np.sum((np.asarray(d) / sigmas) ** 2) for d in deltas))


def total_loss(
    sample,
    model: FaceModel,
    identity: IdentityParams,
    frames: list[FrameParams],
    weights: LossWeights,
    sparsity_weights: np.ndarray | None,
    intr: CameraIntrinsics,
    sparsity: SparsityConfig = SparsityConfig(),
) -> LossBreakdown:
    if len(frames) != len(sample.frames):
        raise LossError(f"{len(frames)} frame parameter sets for {len(sample.frames)} frames")
    records = [render_vertices(model, identity, fp, intr) for fp in frames]
    terms = {
        "pho": photometric_loss([fr.image for fr in sample.frames], records, weights.normalize),
        "lan": landmark_loss([fr.landmarks for fr in sample.frames],
                             [rec.u[model.landmark_indices] for rec in records], weights.normalize),
        "smo": smoothness_loss(model, identity.alpha),
        "spa": 0.0,
        "ble": expression_reg([fp.delta for fp in frames], model.expression_sigmas),
    }
    if sparsity_weights is None:
        sparsity_weights = chroma_weights(model, identity.beta, sparsity)
    terms["spa"] = sparsity_loss(model, identity.beta, sparsity_weights, sparsity)
    return LossBreakdown.combine(terms, weights)
