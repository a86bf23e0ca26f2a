import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import bumpy_sphere, grid_patch, random_rotation, regular_tetrahedron, unit_cube
from saga.datagen import icosphere
from saga.mesh import (Mesh, MeshError, MeshParseError, VertexScalarField, connectivity,
                       edge_lengths, edges, face_areas, face_normals, mean_curvature, parse_mesh,
                       parse_mesh_with_scalar, validate, vertex_areas, write_mesh)

TET_OFF = """OFF
4 4 0
0 0 0
1 0 0
0 1 0
0 0 1
3 0 2 1
3 0 1 3
3 0 3 2
3 1 2 3
"""


# -- parsing and writing ------------------------------------------------------

def test_parse_off_tetrahedron():
    m = parse_mesh(TET_OFF, "off")
    assert (m.n, m.m) == (4, 4)
    assert m.faces.tolist()[0] == [0, 2, 1]
    assert validate(m).ok


def test_parse_obj_one_based():
    text = "# comment\nv 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\nf 1 3 2\nf 1 2 4\nf 1 4 3\nf 2 3 4\n"
    m = parse_mesh(text, "obj")
    assert m.faces.tolist()[0] == [0, 2, 1]
    assert m.n == 4


def test_obj_quad_rejected_with_line():
    text = "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n"
    with pytest.raises(MeshParseError, match="non-triangular face at line 5"):
        parse_mesh(text, "obj")


def test_off_quad_rejected():
    text = "OFF\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n"
    with pytest.raises(MeshParseError, match="line 7"):
        parse_mesh(text, "off")


@pytest.mark.parametrize("text, line", [
    ("OF\n4 1 0\n", 1),
    ("OFF\n4 x 0\n", 2),
    ("OFF\n4 1 0\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n3 0 1 9\n", 7),
])
def test_off_errors_name_line(text, line):
    with pytest.raises(MeshParseError) as exc:
        parse_mesh(text, "off")
    assert exc.value.line == line


def test_unsupported_format():
    with pytest.raises(MeshError):
        parse_mesh(TET_OFF, "ply")


@pytest.mark.parametrize("fmt", ["off", "obj"])
def test_round_trip(fmt):
    m = bumpy_sphere(1, seed=3)
    back = parse_mesh(write_mesh(m, fmt), fmt)
    assert np.max(np.abs(back.vertices - m.vertices)) <= 1e-12
    assert np.array_equal(back.faces, m.faces)


def test_canonical_off_bytes():
    m = parse_mesh(TET_OFF, "off")
    assert write_mesh(m, "off").decode() == TET_OFF
    assert write_mesh(m, "off") == write_mesh(m, "off")


def test_scalar_sidecar_off():
    m = parse_mesh(TET_OFF, "off")
    out = write_mesh(m, "off", VertexScalarField(np.zeros(4))).decode()
    assert out.startswith(TET_OFF)
    assert out[len(TET_OFF):].splitlines() == ["# vscalar 0"] * 4
    back, s = parse_mesh_with_scalar(out, "off")
    assert np.array_equal(s.values, np.zeros(4))


def test_scalar_sidecar_obj_round_trip():
    m = parse_mesh(TET_OFF, "off")
    vals = np.array([0.1, 0.2, 0.3, 0.4])
    back, s = parse_mesh_with_scalar(write_mesh(m, "obj", VertexScalarField(vals)), "obj")
    assert np.array_equal(s.values, vals)
    assert np.array_equal(back.vertices, m.vertices)


def test_scalar_length_mismatch():
    with pytest.raises(MeshError):
        write_mesh(parse_mesh(TET_OFF, "off"), "off", VertexScalarField(np.zeros(3)))


# -- normals ----------------------------------------------------------------

def test_normal_right_hand_rule():
    m = Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    assert np.allclose(face_normals(m), [[0, 0, 1]], atol=0)
    r = Mesh(m.vertices, [[0, 2, 1]])
    assert np.allclose(face_normals(r), [[0, 0, -1]], atol=0)


def test_cube_normals_axis_aligned():
    cube = unit_cube()
    N = face_normals(cube)
    # oracle: explicit per-triangle cross product, normalized
    for (a, b, c), n in zip(cube.faces, N):
        va, vb, vc = cube.vertices[a], cube.vertices[b], cube.vertices[c]
        x = np.cross(vb - va, vc - va)
        assert np.allclose(n, x / np.sqrt(x @ x), atol=1e-15)
    assert np.all(np.isclose(np.abs(N), 0) | np.isclose(np.abs(N), 1))
    keys = [tuple(np.round(n).astype(int)) for n in N]
    assert all(keys.count(k) == 2 for k in set(keys)) and len(set(keys)) == 6


def test_zero_area_face_raises():
    m = Mesh([[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0]], [[0, 1, 2], [0, 1, 3]])
    with pytest.raises(MeshError, match="face 0"):
        face_normals(m)


# -- edges and areas ---------------------------------------------------------

def test_tetrahedron_edges(tet):
    assert np.allclose(edge_lengths(tet), 1.0, atol=1e-15) and len(edge_lengths(tet)) == 6
    big = tet.with_vertices(2 * tet.vertices)
    assert np.allclose(edge_lengths(big), 2.0, atol=1e-15)


def test_edge_order_is_lexicographic():
    e = edges(icosphere(1))
    assert np.all(e[:, 0] < e[:, 1])
    assert [tuple(x) for x in e] == sorted(tuple(x) for x in e)


def test_closed_mesh_edge_count():
    for m in (icosphere(2), unit_cube(), regular_tetrahedron()):
        assert len(edges(m)) == 3 * m.m // 2


def test_tetrahedron_vertex_areas(tet):
    # each vertex touches three faces of area sqrt(3)/4
    assert np.allclose(vertex_areas(tet), 3 * np.sqrt(3) / 4, rtol=1e-14)
    assert np.allclose(vertex_areas(tet.with_vertices(3 * tet.vertices)), 9 * 3 * np.sqrt(3) / 4, rtol=1e-14)


def test_vertex_areas_against_heron():
    m = bumpy_sphere(2, seed=1)
    a, b, c = (np.linalg.norm(m.vertices[m.faces[:, i]] - m.vertices[m.faces[:, (i + 1) % 3]], axis=1)
               for i in range(3))
    s = 0.5 * (a + b + c)
    heron = np.sqrt(s * (s - a) * (s - b) * (s - c))
    expect = np.zeros(m.n)
    for f, ar in zip(m.faces, heron):
        expect[f] += ar
    assert np.allclose(vertex_areas(m), expect, rtol=1e-10)


def test_isolated_vertex_area_zero():
    m = Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5]], [[0, 1, 2]])
    assert vertex_areas(m)[3] == 0.0


# -- connectivity ------------------------------------------------------------

def test_tetrahedron_connectivity(tet):
    c = connectivity(tet)
    assert np.array_equal(c.adjacency.toarray(), np.ones((4, 4)) - np.eye(4))
    assert np.array_equal(c.degree, [3, 3, 3, 3])
    assert np.allclose(c.nonweighted_laplacian @ np.ones(4), 0, atol=0)


def test_strip_degrees():
    m = Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], [[0, 1, 2], [1, 3, 2]])
    # oracle: count the distinct neighbours of each vertex over the face list
    nb = [set() for _ in range(4)]
    for f in m.faces:
        for i in f:
            nb[i] |= set(f) - {i}
    expect = [len(s) for s in nb]
    assert expect == [2, 3, 3, 2]
    assert connectivity(m).degree.tolist() == expect


def test_degree_zero_raises():
    m = Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5]], [[0, 1, 2]])
    with pytest.raises(MeshError, match="degree 0"):
        connectivity(m)


def test_laplacian_rows_stochastic():
    c = connectivity(icosphere(2))
    J = c.adjacency.toarray()
    assert np.array_equal(J, J.T) and np.all(np.diag(J) == 0)
    P = np.eye(J.shape[0]) - c.nonweighted_laplacian.toarray()
    assert np.allclose(P.sum(axis=1), 1.0, atol=1e-15)
    assert np.allclose(c.nonweighted_laplacian @ np.full((J.shape[0], 3), 7.5), 0, atol=1e-13)


# -- curvature ---------------------------------------------------------------

def test_flat_patch_zero_curvature():
    m = grid_patch(7, jitter=0.2)
    H = mean_curvature(m).values
    interior = [i * 7 + j for i in range(1, 6) for j in range(1, 6)]
    assert np.max(np.abs(H[interior])) <= 1e-9


@pytest.mark.parametrize("radius", [1.0, 2.0])
def test_sphere_curvature(radius):
    m = icosphere(3, radius)
    H = mean_curvature(m).values
    assert 0.95 / radius <= H.mean() <= 1.05 / radius


def test_sphere_curvature_converges():
    err = [abs(mean_curvature(icosphere(s)).values.mean() - 1.0) for s in (2, 3, 4)]
    assert err[0] > err[1] > err[2]


def test_signed_curvature_outward_sphere():
    H = mean_curvature(icosphere(2), signed=True).values
    assert np.all(H > 0)


def test_curvature_finite_on_sliver():
    m = grid_patch(4)
    v = m.vertices.copy()
    v[5] = 0.5 * (v[4] + v[9]) + [0, 0, 1e-15]  # collapses two triangles to slivers
    H = mean_curvature(m.with_vertices(v)).values
    assert np.all(np.isfinite(H))


# -- validation --------------------------------------------------------------

def test_validate_clean(tet):
    assert validate(tet).ok and validate(icosphere(2)).ok


def test_validate_repeated_index():
    m = Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], [[0, 1, 2], [0, 1, 3], [1, 1, 2]])
    assert validate(m).degenerate_faces == [2]


def test_validate_nonmanifold_edge():
    v = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1]]
    m = Mesh(v, [[0, 1, 2], [1, 0, 3], [0, 1, 4]])
    assert validate(m).nonmanifold_edges == [(0, 1)]


def test_validate_index_and_isolated():
    m = Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [2, 2, 2]], [[0, 1, 2], [0, 1, 9]])
    rep = validate(m)
    assert rep.index_errors == [1] and 3 in rep.isolated_vertices and not rep.ok


def test_validate_tiny_face():
    v = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0.5, 1e-16, 0], [0, 0, 1]]
    m = Mesh(v, [[0, 1, 2], [0, 3, 1], [0, 2, 4]])
    assert 1 in validate(m).degenerate_faces


# -- properties --------------------------------------------------------------

seeds = st.integers(0, 2**31 - 1)


@settings(max_examples=25, deadline=None)
@given(seeds)
def test_normals_unit_and_flip(seed):
    m = bumpy_sphere(1, seed=seed)
    N = face_normals(m)
    assert np.max(np.abs(np.linalg.norm(N, axis=1) - 1)) <= 1e-12
    flipped = Mesh(m.vertices, m.faces[:, [0, 2, 1]])
    assert np.array_equal(face_normals(flipped), -N)


@settings(max_examples=25, deadline=None)
@given(seeds)
def test_rigid_motion_invariance(seed):
    rng = np.random.default_rng(seed)
    m = bumpy_sphere(1, seed=seed)
    R, t = random_rotation(rng), rng.normal(size=3) * 5
    moved = m.with_vertices(m.vertices @ R.T + t)
    assert np.allclose(edge_lengths(moved), edge_lengths(m), rtol=1e-10, atol=0)
    assert np.allclose(vertex_areas(moved), vertex_areas(m), rtol=1e-10, atol=0)


@settings(max_examples=25, deadline=None)
@given(seeds)
def test_area_sum_identity(seed):
    m = bumpy_sphere(1, amp=0.3, seed=seed)
    assert np.isclose(vertex_areas(m).sum(), 3 * face_areas(m).sum(), rtol=1e-10, atol=0)


@settings(max_examples=25, deadline=None)
@given(seeds, st.floats(0.1, 10.0))
def test_area_scaling(seed, s):
    m = bumpy_sphere(1, seed=seed)
    assert np.allclose(vertex_areas(m.with_vertices(s * m.vertices)), s * s * vertex_areas(m), rtol=1e-12)


@settings(max_examples=25, deadline=None)
@given(seeds)
def test_lnon_annihilates_constants(seed):
    rng = np.random.default_rng(seed)
    L = connectivity(bumpy_sphere(1, seed=seed)).nonweighted_laplacian
    c = rng.normal(size=3) * 100
    assert np.max(np.abs(L @ np.tile(c, (L.shape[0], 1)))) <= 1e-12 * np.max(np.abs(c))
