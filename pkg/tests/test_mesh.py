import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfface.mesh import (
    FALLBACK_NORMAL,
    Mesh,
    MeshError,
    build_deformation_graph,
    build_skinning_matrix,
    compute_vertex_normals,
    graph_neighborhoods,
    load_landmark_indices,
    load_mesh,
    save_landmark_indices,
    save_mesh,
)
from conftest import sphere_mesh

TETRA = """# tetrahedron
v 0 0 0
v 1 0 0
v 0 1 0
v 0 0 1
f 1 3 2
f 1 2 4
f 1 4 3
f 2 3 4
"""


def test_load_tetrahedron(tmp_path):
    p = tmp_path / "t.obj"
    p.write_text(TETRA)
    m = load_mesh(p)
    assert m.n_vertices == 4 and len(m.faces) == 4
    assert m.colors is None


def test_load_colors_and_slash_tokens(tmp_path):
    p = tmp_path / "c.obj"
    p.write_text("v 0 0 0 1 0 0\nv 1 0 0 0 1 0\nv 0 1 0 0 0 1\nvn 0 0 1\nf 1/1/1 2/2/1 3/3/1\n")
    m = load_mesh(p)
    assert m.colors.shape == (3, 3)
    assert np.all((m.colors >= 0) & (m.colors <= 1))
    assert m.faces.tolist() == [[0, 1, 2]]


def test_load_rejects_out_of_range_index(tmp_path):
    p = tmp_path / "bad.obj"
    p.write_text("".join(f"v {i} 0 0\n" for i in range(5)) + "f 1 2 10\n")
    with pytest.raises(MeshError, match="10"):
        load_mesh(p)


def test_load_rejects_quads_with_line_number(tmp_path):
    p = tmp_path / "quad.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    with pytest.raises(MeshError, match=":5:"):
        load_mesh(p)


def test_load_parse_error_names_line(tmp_path):
    p = tmp_path / "bad.obj"
    p.write_text("v 0 0 0\nv 1 x 0\n")
    with pytest.raises(MeshError, match=":2:"):
        load_mesh(p)


def test_load_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_mesh(tmp_path / "nope.obj")


def test_mesh_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    m = sphere_mesh(50)
    m.colors = rng.uniform(size=(m.n_vertices, 3))
    save_mesh(tmp_path / "s.obj", m)
    back = load_mesh(tmp_path / "s.obj")
    assert np.array_equal(back.vertices, m.vertices)
    assert np.array_equal(back.colors, m.colors)
    assert np.array_equal(back.faces, m.faces)


def test_landmark_sidecar(tmp_path):
    idx = np.arange(66) * 2
    save_landmark_indices(tmp_path / "l.txt", idx)
    assert np.array_equal(load_landmark_indices(tmp_path / "l.txt"), idx)
    (tmp_path / "short.txt").write_text("1\n2\n")
    with pytest.raises(MeshError, match="66"):
        load_landmark_indices(tmp_path / "short.txt")


def test_landmarks_must_be_distinct():
    with pytest.raises(MeshError):
        Mesh(np.zeros((3, 3)), [[0, 1, 2]], landmark_vertex_indices=[0, 0])


def test_normals_planar_triangle():
    m = Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    assert np.allclose(compute_vertex_normals(m), [[0, 0, 1]] * 3)


def test_normals_sphere():
    m = sphere_mesh(400)
    n = compute_vertex_normals(m)
    radial = m.vertices / np.linalg.norm(m.vertices, axis=1, keepdims=True)
    assert np.min(np.sum(n * radial, 1)) > 0.99


def test_normals_zero_area_face_and_fallback():
    v = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 2, 2]]
    m = Mesh(v, [[0, 1, 2], [3, 3, 3]])
    n = compute_vertex_normals(m)
    assert np.all(np.isfinite(n))
    assert np.allclose(n[:3], [0, 0, 1])
    assert np.array_equal(n[3], FALLBACK_NORMAL)


def test_graph_all_vertices_and_range():
    m = sphere_mesh(60)
    g = build_deformation_graph(m, m.n_vertices)
    assert np.array_equal(g.node_positions, m.vertices)
    with pytest.raises(MeshError):
        build_deformation_graph(m, 0)
    with pytest.raises(MeshError):
        build_deformation_graph(m, m.n_vertices + 1)


def test_graph_farthest_point_deterministic():
    m = sphere_mesh(300)
    a = build_deformation_graph(m, 40)
    b = build_deformation_graph(m, 40)
    assert a.node_vertex_ids[0] == 0
    assert np.array_equal(a.node_vertex_ids, b.node_vertex_ids)
    assert len(np.unique(a.node_vertex_ids)) == 40


def test_skinning_identity_when_graph_is_mesh():
    m = sphere_mesh(60)
    g = build_deformation_graph(m, m.n_vertices)
    s = build_skinning_matrix(m, g, 1)
    assert np.allclose(s.matrix.toarray(), np.eye(m.n_vertices))
    nb = graph_neighborhoods(s, g)
    assert all(len(n) == 0 for n in nb.neighborhoods)


def test_skinning_midpoint_weights():
    m = Mesh([[0, 0, 0], [2, 0, 0], [1, 0, 0]], [[0, 1, 2]])
    g = build_deformation_graph(m, 2)
    s = build_skinning_matrix(m, g, 2)
    assert np.allclose(s.matrix.toarray()[2], [0.5, 0.5])


def test_skinning_k_too_large():
    m = sphere_mesh(30)
    g = build_deformation_graph(m, 5)
    with pytest.raises(MeshError):
        build_skinning_matrix(m, g, 6)


@settings(max_examples=25, deadline=None)
@given(st.integers(20, 120), st.integers(2, 19), st.integers(1, 6), st.integers(0, 10_000))
def test_skinning_rows_and_translation_transfer(nv, ng, k, seed):
    rng = np.random.default_rng(seed)
    m = Mesh(rng.normal(size=(nv, 3)), np.zeros((0, 3)))
    g = build_deformation_graph(m, ng)
    k = min(k, ng)
    s = build_skinning_matrix(m, g, k)
    w = s.matrix.toarray()
    assert np.all(w >= 0)
    assert np.max(np.abs(w.sum(1) - 1)) <= 1e-12
    assert np.all((w > 0).sum(1) <= k)
    t = rng.normal(size=3)
    moved = s.apply(np.tile(t, (ng, 1)))
    assert np.max(np.abs(moved - t)) <= 1e-10
    # the expanded 3|V| x 3|G| form acts the same way
    assert np.allclose(s.dense_expanded() @ np.tile(t, ng), np.tile(t, nv))


def test_neighborhoods_match_brute_force():
    rng = np.random.default_rng(3)
    m = Mesh(rng.normal(size=(80, 3)), np.zeros((0, 3)))
    g = build_deformation_graph(m, 15)
    s = build_skinning_matrix(m, g, 3)
    nb = graph_neighborhoods(s, g)
    w = s.matrix.toarray()
    expect = [set() for _ in range(15)]
    for v in range(80):
        nz = np.nonzero(w[v])[0]
        for i in nz:
            for j in nz:
                if i != j:
                    expect[i].add(j)
    assert [set(n.tolist()) for n in nb.neighborhoods] == expect
    for i, n in enumerate(nb.neighborhoods):
        assert i not in n
        for j in n:
            assert i in nb.neighborhoods[j]


def test_two_nodes_sharing_a_vertex_are_neighbors():
    m = Mesh([[0, 0, 0], [2, 0, 0], [1, 0.1, 0], [5, 0, 0]], np.zeros((0, 3)))
    g = build_deformation_graph(m, 3)
    s = build_skinning_matrix(m, g, 2)
    nb = graph_neighborhoods(s, g)
    # nodes sit on vertices 0, 3, 1; vertex 2 is shared by the nodes on 0 and 1
    assert g.node_vertex_ids.tolist() == [0, 3, 1]
    assert nb.neighborhoods[0].tolist() == [2] and nb.neighborhoods[2].tolist() == [0]
    assert len(nb.neighborhoods[1]) == 0
