"""Learnable face identity model: graph geometry subspace, blendshapes, appearance."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .archive import read_archive, write_archive
from .mesh import (
    DeformationGraph,
    Mesh,
    SkinningMatrix,
    build_deformation_graph,
    build_skinning_matrix,
    graph_neighborhoods,
)

SKIN_TONE = (0.8, 0.6, 0.5)
N_SH = 9


class ModelError(ValueError):
    pass


@dataclass(eq=False)
class FaceModel:
    mesh: Mesh
    graph: DeformationGraph
    skinning: SkinningMatrix
    mean_graph: np.ndarray
    geom_basis: np.ndarray
    blendshapes: np.ndarray
    graph_blendshapes: np.ndarray
    appear_mean: np.ndarray
    appear_basis: np.ndarray
    expression_sigmas: np.ndarray

    def __post_init__(self):
        nv, ng = self.n_vertices, self.n_nodes
        checks = [
            (self.mean_graph.shape == (3 * ng,), "mean_graph"),
            (self.geom_basis.shape[0] == 3 * ng, "geom_basis rows"),
            (self.blendshapes.shape[0] == 3 * nv, "blendshapes rows"),
            (self.graph_blendshapes.shape[0] == 3 * ng, "graph_blendshapes rows"),
            (self.appear_mean.shape == (3 * nv,), "appear_mean"),
            (self.appear_basis.shape[0] == 3 * nv, "appear_basis rows"),
            (self.expression_sigmas.shape == (self.blendshapes.shape[1],), "expression_sigmas"),
            (self.skinning.n_vertices == nv and self.skinning.n_nodes == ng, "skinning"),
        ]
        for ok, what in checks:
            if not ok:
                raise ModelError(f"inconsistent model dimensions: {what}")
        if np.any(self.expression_sigmas <= 0):
            raise ModelError("expression sigmas must be strictly positive")

    @property
    def n_vertices(self) -> int:
        return self.mesh.n_vertices

    @property
    def n_nodes(self) -> int:
        return self.graph.n_nodes

    @property
    def n_identity(self) -> int:
        return self.geom_basis.shape[1]

    @property
    def n_appearance(self) -> int:
        return self.appear_basis.shape[1]

    @property
    def n_expression(self) -> int:
        return self.blendshapes.shape[1]

    @property
    def mean_shape(self) -> np.ndarray:
        return self.mesh.vertices.ravel()

    @property
    def landmark_indices(self) -> np.ndarray:
        return self.mesh.landmark_vertex_indices

    @cached_property
    def node_pairs(self) -> np.ndarray:
        return self.graph.neighbor_pairs()

    @cached_property
    def vertex_pairs(self) -> np.ndarray:
        """Ordered 1-ring pairs (each mesh edge in both directions)."""
        e = self.mesh.edges
        return np.concatenate([e, e[:, ::-1]])

    @cached_property
    def node_pair_difference(self) -> sp.csr_matrix:
        """Sparse D with (D t)_k = t_i - t_j for the k-th ordered node pair."""
        return _pair_difference(self.node_pairs, self.n_nodes)

    @cached_property
    def vertex_pair_difference(self) -> sp.csr_matrix:
        return _pair_difference(self.vertex_pairs, self.n_vertices)

    def projected_basis(self) -> np.ndarray:
        return ocl_project(self.geom_basis, self.graph_blendshapes)

    def copy(self) -> "FaceModel":
        return FaceModel(
            self.mesh, self.graph, self.skinning, self.mean_graph.copy(), self.geom_basis.copy(),
            self.blendshapes.copy(), self.graph_blendshapes.copy(), self.appear_mean.copy(),
            self.appear_basis.copy(), self.expression_sigmas.copy(),
        )


def _pair_difference(pairs: np.ndarray, n: int) -> sp.csr_matrix:
    k = np.arange(len(pairs))
    rows = np.concatenate([k, k])
    cols = np.concatenate([pairs[:, 0], pairs[:, 1]])
    vals = np.concatenate([np.ones(len(k)), -np.ones(len(k))])
    return sp.csr_matrix((vals, (rows, cols)), shape=(len(pairs), n))


@dataclass
class IdentityParams:
    alpha: np.ndarray
    beta: np.ndarray

    @classmethod
    def zeros(cls, model: FaceModel) -> "IdentityParams":
        return cls(np.zeros(model.n_identity), np.zeros(model.n_appearance))


def wrap_rotation(rotation: np.ndarray) -> np.ndarray:
    """Map axis-angle vectors to the equivalent rotation with angle <= pi."""
    r = np.array(rotation, dtype=np.float64)
    flat = r.reshape(-1, 3)
    ang = np.linalg.norm(flat, axis=1)
    big = ang > np.pi
    if np.any(big):
        k = np.ceil((ang[big] - np.pi) / (2 * np.pi))
        flat[big] *= ((ang[big] - 2 * np.pi * k) / ang[big])[:, None]
    return flat.reshape(r.shape)


@dataclass
class FrameParams:
    rotation: np.ndarray
    translation: np.ndarray
    gamma: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        self.rotation = wrap_rotation(np.asarray(self.rotation, dtype=np.float64))
        self.translation = np.asarray(self.translation, dtype=np.float64)
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        self.delta = np.asarray(self.delta, dtype=np.float64)

    @classmethod
    def neutral(cls, model: FaceModel, depth: float = 4.0, ambient: float = 1.0) -> "FrameParams":
        gamma = np.zeros(3 * N_SH)
        gamma[:3] = ambient
        return cls(np.zeros(3), np.array([0.0, 0.0, depth]), gamma, np.zeros(model.n_expression))


def fit_graph_blendshapes(blendshapes: np.ndarray, skinning: SkinningMatrix) -> np.ndarray:
    """Least-squares graph-domain blendshapes X with S X ~= B."""
    w = skinning.matrix
    support = np.asarray((w != 0).sum(axis=0)).ravel()
    if np.any(support == 0):
        node = int(np.argmax(support == 0))
        raise ModelError(f"skinning matrix is rank deficient: node {node} skins no vertex")
    b = np.asarray(blendshapes, dtype=np.float64)
    nv, ncol = w.shape[0], b.shape[1]
    if b.shape[0] != 3 * nv:
        raise ModelError(f"blendshapes have {b.shape[0]} rows, expected {3 * nv}")
    lu = splu(sp.csc_matrix(w.T @ w))
    # the 3x3 identity blocks decouple coordinates: solve per axis
    rhs = w.T @ b.reshape(nv, 3 * ncol)
    x = lu.solve(np.ascontiguousarray(rhs))
    return x.reshape(-1, ncol)


def orthonormalize(basis: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Modified Gram-Schmidt with one re-orthogonalisation pass."""
    q = np.array(basis, dtype=np.float64, copy=True)
    for j in range(q.shape[1]):
        v = q[:, j].copy()
        n0 = np.linalg.norm(v)
        for _ in range(2):
            for i in range(j):
                v -= (q[:, i] @ v) * q[:, i]
        n1 = np.linalg.norm(v)
        if n0 == 0 or n1 < tol * n0:
            raise ModelError(f"column {j} is numerically dependent on the previous columns")
        q[:, j] = v / n1
    return q


def ocl_project(theta: np.ndarray, graph_blendshapes: np.ndarray, orthonormal: bool = True) -> np.ndarray:
    """Project the columns of ``theta`` onto the orthogonal complement of the blendshapes."""
    theta = np.asarray(theta, dtype=np.float64)
    bg = np.asarray(graph_blendshapes, dtype=np.float64)
    if theta.shape[0] != bg.shape[0]:
        raise ModelError(f"row mismatch: basis has {theta.shape[0]}, blendshapes {bg.shape[0]}")
    if orthonormal:
        return theta - bg @ (bg.T @ theta)
    return theta - bg @ np.linalg.solve(bg.T @ bg, bg.T @ theta)


def assemble_graph(model: FaceModel, alpha: np.ndarray) -> np.ndarray:
    return model.mean_graph + model.projected_basis() @ np.asarray(alpha, dtype=np.float64)


def assemble_vertices(model: FaceModel, alpha: np.ndarray, delta: np.ndarray) -> np.ndarray:
    disp = model.projected_basis() @ np.asarray(alpha, dtype=np.float64)
    v = model.mean_shape + model.skinning.apply(disp).ravel()
    return v + model.blendshapes @ np.asarray(delta, dtype=np.float64)


def assemble_appearance(model: FaceModel, beta: np.ndarray) -> np.ndarray:
    return model.appear_mean + model.appear_basis @ np.asarray(beta, dtype=np.float64)


def init_model(
    mesh: Mesh,
    blendshapes: np.ndarray,
    expression_sigmas: np.ndarray,
    *,
    node_count: int,
    n_identity: int,
    n_appearance: int,
    k: int = 4,
    seed: int = 0,
    skin_tone: tuple[float, float, float] = SKIN_TONE,
) -> FaceModel:
    if mesh.landmark_vertex_indices is None:
        raise ModelError("mesh has no landmark vertex indices")
    nv = mesh.n_vertices
    blendshapes = np.asarray(blendshapes, dtype=np.float64)
    if blendshapes.ndim != 2 or blendshapes.shape[0] != 3 * nv:
        raise ModelError(f"blendshapes shape {blendshapes.shape} does not match mesh with {nv} vertices")
    graph = build_deformation_graph(mesh, node_count)
    skin = build_skinning_matrix(mesh, graph, k)
    graph = graph_neighborhoods(skin, graph)
    bg = orthonormalize(fit_graph_blendshapes(blendshapes, skin))
    rng = np.random.default_rng(seed)
    scale = 1e-3 * mesh.bbox_diagonal()
    theta_s = ocl_project(rng.normal(0.0, scale, (3 * graph.n_nodes, n_identity)), bg)
    theta_a = rng.normal(0.0, 1e-3, (3 * nv, n_appearance))
    return FaceModel(
        mesh=mesh,
        graph=graph,
        skinning=skin,
        mean_graph=graph.node_positions.ravel().copy(),
        geom_basis=theta_s,
        blendshapes=blendshapes,
        graph_blendshapes=bg,
        appear_mean=np.tile(np.asarray(skin_tone, dtype=np.float64), nv),
        appear_basis=theta_a,
        expression_sigmas=np.asarray(expression_sigmas, dtype=np.float64).copy(),
    )


def save_model(path: str | Path, model: FaceModel) -> None:
    write_archive(path, {
        "mean_shape": model.mean_shape,
        "faces": model.mesh.faces,
        "mean_graph": model.mean_graph,
        "geom_basis": model.geom_basis,
        "appear_mean": model.appear_mean,
        "appear_basis": model.appear_basis,
        "blendshapes": model.blendshapes,
        "graph_blendshapes": model.graph_blendshapes,
        "skinning_indices": model.skinning.indices,
        "skinning_weights": model.skinning.weights,
        "expression_sigmas": model.expression_sigmas,
        "landmark_indices": model.landmark_indices,
        "graph_node_ids": model.graph.node_vertex_ids,
    })


def load_model(path: str | Path) -> FaceModel:
    a = read_archive(path)
    required = ["mean_shape", "faces", "mean_graph", "geom_basis", "appear_mean", "appear_basis",
                "blendshapes", "graph_blendshapes", "skinning_indices", "skinning_weights",
                "expression_sigmas", "landmark_indices"]
    missing = [k for k in required if k not in a]
    if missing:
        raise ModelError(f"{path}: model archive lacks {', '.join(missing)}")
    mesh = Mesh(a["mean_shape"].reshape(-1, 3), a["faces"], landmark_vertex_indices=a["landmark_indices"])
    nodes = a["mean_graph"].reshape(-1, 3)
    ids = a.get("graph_node_ids", np.full(len(nodes), -1, dtype=np.int64))
    skin = SkinningMatrix(a["skinning_indices"], a["skinning_weights"], len(nodes))
    graph = graph_neighborhoods(skin, DeformationGraph(nodes, ids))
    return FaceModel(
        mesh=mesh, graph=graph, skinning=skin, mean_graph=a["mean_graph"], geom_basis=a["geom_basis"],
        blendshapes=a["blendshapes"], graph_blendshapes=a["graph_blendshapes"],
        appear_mean=a["appear_mean"], appear_basis=a["appear_basis"],
        expression_sigmas=a["expression_sigmas"],
    )


def load_blendshapes(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    a = read_archive(path)
    for key in ("blendshapes", "expression_sigmas"):
        if key not in a:
            raise ModelError(f"{path}: blendshape archive lacks {key!r}")
    return a["blendshapes"], a["expression_sigmas"]


def save_blendshapes(path: str | Path, blendshapes: np.ndarray, sigmas: np.ndarray) -> None:
    write_archive(path, {"blendshapes": blendshapes, "expression_sigmas": sigmas})
