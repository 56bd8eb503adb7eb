"""Triangle meshes, deformation graphs and skinning weights."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

N_LANDMARKS = 66
FALLBACK_NORMAL = np.array([0.0, 0.0, 1.0])


class MeshError(ValueError):
    pass


@dataclass(eq=False)
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray
    colors: np.ndarray | None = None
    landmark_vertex_indices: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        nv = len(self.vertices)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= nv):
            raise MeshError(f"face index out of range for {nv} vertices")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(nv, 3)
        if self.landmark_vertex_indices is not None:
            lmk = np.asarray(self.landmark_vertex_indices, dtype=np.int64)
            if len(np.unique(lmk)) != len(lmk):
                raise MeshError("landmark vertex indices are not distinct")
            if lmk.size and (lmk.min() < 0 or lmk.max() >= nv):
                raise MeshError("landmark vertex index out of range")
            self.landmark_vertex_indices = lmk

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges (i < j), sorted."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0)

    @cached_property
    def vertex_face_incidence(self) -> sp.csr_matrix:
        """|V| x |F| 0/1 matrix; row i marks the faces touching vertex i."""
        nf = len(self.faces)
        rows = self.faces.ravel()
        cols = np.repeat(np.arange(nf), 3)
        return sp.csr_matrix((np.ones(3 * nf), (rows, cols)), shape=(self.n_vertices, nf))

    @cached_property
    def corner_scatter(self) -> tuple[sp.csr_matrix, sp.csr_matrix, sp.csr_matrix]:
        """Per triangle corner k, the |V| x |F| matrix sending face values to that corner's vertex."""
        nf = len(self.faces)
        cols = np.arange(nf)
        return tuple(
            sp.csr_matrix((np.ones(nf), (self.faces[:, k], cols)), shape=(self.n_vertices, nf))
            for k in range(3)
        )

    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))


def _parse_index(token: str, nv_hint: int | None) -> int:
    head = token.split("/")[0]
    idx = int(head)
    if idx < 0:
        if nv_hint is None:
            raise ValueError("relative index")
        return nv_hint + idx
    return idx - 1


def load_mesh(path: str | Path) -> Mesh:
    """Read an ASCII OBJ-style mesh.

    Accepted records: ``v x y z [r g b]``, ``f a b c`` (1-based, ``a/b/c`` tokens
    allowed), ``#`` comments and blank lines. Other record types are ignored.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"mesh file not found: {path}")
    verts, cols, faces = [], [], []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split("#", 1)[0].split()
            if not parts:
                continue
            tag = parts[0]
            try:
                if tag == "v":
                    vals = [float(x) for x in parts[1:]]
                    if len(vals) not in (3, 6):
                        raise ValueError("vertex needs 3 or 6 values")
                    verts.append(vals[:3])
                    cols.append(vals[3:] if len(vals) == 6 else None)
                elif tag == "f":
                    idx = [_parse_index(t, len(verts)) for t in parts[1:]]
                    if len(idx) != 3:
                        raise MeshError(f"{path}:{lineno}: non-triangle face with {len(idx)} vertices")
                    faces.append(idx)
            except MeshError:
                raise
            except ValueError as exc:
                raise MeshError(f"{path}:{lineno}: parse error: {exc}") from exc
    if not verts:
        raise MeshError(f"{path}: no vertices")
    nv = len(verts)
    for k, f in enumerate(faces):
        if min(f) < 0 or max(f) >= nv:
            raise MeshError(f"{path}: face {k} references vertex {max(f) + 1} but mesh has {nv} vertices")
    has_colors = [c is not None for c in cols]
    if any(has_colors) and not all(has_colors):
        raise MeshError(f"{path}: colors given for some vertices only")
    colors = np.array(cols, dtype=np.float64) if all(has_colors) else None
    if colors is not None and (colors.min() < 0 or colors.max() > 1):
        raise MeshError(f"{path}: vertex colors must lie in [0, 1]")
    return Mesh(np.array(verts), np.array(faces, dtype=np.int64).reshape(-1, 3), colors)


def save_mesh(path: str | Path, mesh: Mesh) -> None:
    lines = []
    for i, v in enumerate(mesh.vertices.tolist()):
        if mesh.colors is not None:
            c = mesh.colors[i].tolist()
            lines.append(f"v {v[0]!r} {v[1]!r} {v[2]!r} {c[0]!r} {c[1]!r} {c[2]!r}")
        else:
            lines.append(f"v {v[0]!r} {v[1]!r} {v[2]!r}")
    for f in mesh.faces:
        lines.append(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_landmark_indices(path: str | Path) -> np.ndarray:
    path = Path(path)
    rows = [ln.strip() for ln in path.read_text().splitlines() if ln.strip()]
    if len(rows) != N_LANDMARKS:
        raise MeshError(f"{path}: expected {N_LANDMARKS} landmark indices, got {len(rows)}")
    try:
        return np.array([int(r) for r in rows], dtype=np.int64)
    except ValueError as exc:
        raise MeshError(f"{path}: {exc}") from exc


def save_landmark_indices(path: str | Path, indices: np.ndarray) -> None:
    Path(path).write_text("".join(f"{int(i)}\n" for i in indices))


def compute_vertex_normals(mesh: Mesh, vertex_positions: np.ndarray | None = None) -> np.ndarray:
    v = mesh.vertices if vertex_positions is None else np.asarray(vertex_positions, dtype=np.float64)
    f = mesh.faces
    # un-normalised cross products are area weighted
    cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    raw = mesh.vertex_face_incidence @ cross
    norm = np.linalg.norm(raw, axis=1)
    ok = norm > 1e-12
    out = np.tile(FALLBACK_NORMAL, (len(v), 1))
    out[ok] = raw[ok] / norm[ok, None]
    return out


@dataclass(eq=False)
class DeformationGraph:
    node_positions: np.ndarray
    node_vertex_ids: np.ndarray
    neighborhoods: list[np.ndarray] = field(default_factory=list)

    @property
    def n_nodes(self) -> int:
        return len(self.node_positions)

    def neighbor_pairs(self) -> np.ndarray:
        """Ordered pairs (i, j) with j in N_i."""
        pairs = [(i, j) for i, nb in enumerate(self.neighborhoods) for j in nb]
        return np.array(pairs, dtype=np.int64).reshape(-1, 2)


def farthest_point_sampling(points: np.ndarray, count: int, start: int = 0) -> np.ndarray:
    chosen = np.empty(count, dtype=np.int64)
    chosen[0] = start
    dist = np.linalg.norm(points - points[start], axis=1)
    for k in range(1, count):
        nxt = int(np.argmax(dist))
        chosen[k] = nxt
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return chosen


def build_deformation_graph(mesh: Mesh, node_count: int) -> DeformationGraph:
    nv = mesh.n_vertices
    if not 1 <= node_count <= nv:
        raise MeshError(f"node_count must be in [1, {nv}], got {node_count}")
    if node_count == nv:
        ids = np.arange(nv)
    else:
        ids = farthest_point_sampling(mesh.vertices, node_count)
    return DeformationGraph(mesh.vertices[ids].copy(), ids)


@dataclass(eq=False)
class SkinningMatrix:
    """Per-vertex (node index, weight) lists stored as dense |V| x k arrays.

    Acting on stacked 3-vectors each weight is an identity 3x3 block, so the
    operator is applied as ``W @ D`` with ``D`` of shape (|G|, 3).
    """

    indices: np.ndarray
    weights: np.ndarray
    n_nodes: int

    @cached_property
    def matrix(self) -> sp.csr_matrix:
        nv, k = self.indices.shape
        rows = np.repeat(np.arange(nv), k)
        m = sp.csr_matrix(
            (self.weights.ravel(), (rows, self.indices.ravel())), shape=(nv, self.n_nodes)
        )
        m.eliminate_zeros()
        return m

    @property
    def n_vertices(self) -> int:
        return len(self.indices)

    def apply(self, node_disp: np.ndarray) -> np.ndarray:
        """(|G|, 3) or (3|G|,) node displacements -> (|V|, 3)."""
        d = np.asarray(node_disp).reshape(self.n_nodes, -1)
        return self.matrix @ d

    def dense_expanded(self) -> np.ndarray:
        """The 3|V| x 3|G| matrix (tests and small instances only)."""
        return np.kron(self.matrix.toarray(), np.eye(3))


def build_skinning_matrix(mesh: Mesh, graph: DeformationGraph, k: int = 4) -> SkinningMatrix:
    g = graph.n_nodes
    if k < 1 or k > g:
        raise MeshError(f"k must be in [1, {g}], got {k}")
    kq = min(k + 1, g)
    dist, idx = cKDTree(graph.node_positions).query(mesh.vertices, k=kq)
    dist = dist.reshape(len(mesh.vertices), kq)
    idx = idx.reshape(len(mesh.vertices), kq)
    d_k, i_k = dist[:, :k], idx[:, :k]
    if kq > k:
        d_ref = dist[:, k]
    else:
        # fewer than k+1 nodes: fall off towards twice the farthest bound node
        d_ref = 2.0 * d_k[:, -1]
    with np.errstate(invalid="ignore", divide="ignore"):
        w = (1.0 - d_k / d_ref[:, None]) ** 2
    w = np.where(np.isfinite(w), w, 0.0)
    s = w.sum(axis=1)
    flat = s <= 0
    w[flat] = 1.0 / k
    w /= w.sum(axis=1, keepdims=True)
    coincident = d_k[:, 0] <= 1e-12
    w[coincident] = 0.0
    w[coincident, 0] = 1.0
    order = np.argsort(i_k, axis=1, kind="stable")
    i_k = np.take_along_axis(i_k, order, axis=1)
    w = np.take_along_axis(w, order, axis=1)
    return SkinningMatrix(i_k.astype(np.int64), w, g)


def graph_neighborhoods(skinning: SkinningMatrix, graph: DeformationGraph) -> DeformationGraph:
    m = skinning.matrix
    pattern = (m != 0).astype(np.float64)
    share = (pattern.T @ pattern).tocoo()
    keep = share.row != share.col
    rows, cols = share.row[keep], share.col[keep]
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    nbhd = [np.empty(0, dtype=np.int64) for _ in range(graph.n_nodes)]
    if len(rows):
        splits = np.searchsorted(rows, np.arange(graph.n_nodes + 1))
        nbhd = [cols[splits[i]:splits[i + 1]].astype(np.int64) for i in range(graph.n_nodes)]
    return DeformationGraph(graph.node_positions, graph.node_vertex_ids, nbhd)
