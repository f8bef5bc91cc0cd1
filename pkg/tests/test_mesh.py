"""Macro mesh construction, skeleton topology and DOF accounting."""

import math

import numpy as np
import pytest
from scipy.spatial.distance import cdist

from macrohdg.errors import InvalidConfig
from macrohdg.fem import macro_c0_map
from macrohdg.mesh import (
    DofLayout,
    build_box_macro_mesh,
    dof_counts,
    export_vtk,
    skeleton,
    write_vtk,
)

UNIT2 = [(0.0, 1.0), (0.0, 1.0)]
UNIT3 = [(0.0, 1.0), (0.0, 1.0), (0.0, 1.0)]


def _box(d):
    return UNIT2 if d == 2 else UNIT3


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("d,n,expected", [(2, 1, 2), (2, 3, 18), (3, 1, 6), (3, 2, 48)])
def test_macro_count(d, n, expected):
    mesh = build_box_macro_mesh(_box(d), n, m=1)
    assert mesh.n_macros == expected


@pytest.mark.parametrize("d", [2, 3])
@pytest.mark.parametrize("m", [1, 2, 3])
def test_volume_conservation(d, m):
    box = [(-1.0, 2.0)] * d
    mesh = build_box_macro_mesh(box, 2, m=m)
    vol_box = 3.0**d
    assert np.sum(mesh.macro_dets) / math.factorial(d) == pytest.approx(
        vol_box, rel=1e-12
    )
    # sub-element volumes sum to the same
    first = mesh.sub_vertices[:, :, 0:1, :]
    jac = np.swapaxes(mesh.sub_vertices[:, :, 1:, :] - first, -1, -2)
    dets = np.linalg.det(jac)
    assert np.all(dets > 0)
    assert dets.sum() / math.factorial(d) == pytest.approx(vol_box, rel=1e-12)


@pytest.mark.parametrize("d", [2, 3])
def test_macros_positively_oriented(d):
    mesh = build_box_macro_mesh(_box(d), 2, m=1)
    assert np.all(mesh.macro_dets > 0)


def test_anisotropic_box_and_counts():
    mesh = build_box_macro_mesh([(0, 2), (0, 1), (0, 1)], (4, 2, 2), m=1)
    assert mesh.n_macros == 6 * 16
    assert np.sum(mesh.macro_dets) / 6 == pytest.approx(2.0, rel=1e-12)


@pytest.mark.parametrize(
    "box,n,m",
    [
        ([(0, 0), (0, 1)], 1, 1),
        ([(0, 1), (1, 0)], 1, 1),
        ([(0, 1), (0, 1)], 0, 1),
        ([(0, 1), (0, 1)], 1, 0),
        ([(0, 1)], 1, 1),
    ],
)
def test_invalid_configs_raise(box, n, m):
    with pytest.raises(InvalidConfig):
        build_box_macro_mesh(box, n, m=m)


def test_path_affine_map_hits_vertices():
    mesh = build_box_macro_mesh(_box(3), 2, m=1)
    path_verts = np.zeros((4, 3))
    for k in range(1, 4):
        path_verts[k, :k] = 1.0
    for e in range(0, mesh.n_macros, 7):
        mapped = mesh.to_physical(e, path_verts)
        assert np.allclose(mapped, mesh.macro_vertices[e], atol=1e-14)


# ---------------------------------------------------------------------------
# skeleton
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("d,n,expected", [(2, 1, 3), (2, 2, 12), (3, 1, 12), (3, 2, 96)])
def test_skeleton_count_fully_periodic(d, n, expected):
    # d! macros per cell with d+1 faces each, all paired: d!(d+1)/2 n^d faces
    mesh = build_box_macro_mesh(_box(d), n, m=1)
    assert mesh.n_skeleton_faces == expected
    assert all(not f.is_boundary for f in mesh.skeleton_faces)


@pytest.mark.parametrize("d", [2, 3])
def test_boundary_faces_without_periodicity(d):
    n = 2
    mesh = build_box_macro_mesh(_box(d), n, m=1, periodic=False)
    expected_boundary = 2 * d * n ** (d - 1) * math.factorial(d - 1)
    assert len(mesh.boundary_faces) == expected_boundary
    assert all(f.neighbor is None for f in mesh.boundary_faces)


def test_mixed_periodicity():
    mesh = build_box_macro_mesh(UNIT2, 2, m=1, periodic=(True, False))
    # y boundaries open: 2 cells x 2 sides x 1 edge each
    assert len(mesh.boundary_faces) == 4
    for f in mesh.skeleton_faces:
        if not f.is_boundary:
            assert f.shift[1] == 0.0


@pytest.mark.parametrize("d", [2, 3])
def test_periodic_pairs_shift_by_extent(d):
    mesh = build_box_macro_mesh(_box(d), 2, m=1)
    pairs = mesh.periodic_pairs
    # per axis: the wrap plane carries n^(d-1) cell faces of (d-1)! simplices
    assert len(pairs) == (4 if d == 2 else 24)
    for _, _, shift in pairs:
        nonzero = np.nonzero(shift)[0]
        assert len(nonzero) == 1
        assert abs(shift[nonzero[0]]) == pytest.approx(1.0)


@pytest.mark.parametrize("d", [2, 3])
def test_vertex_perm_matches_coordinates(d):
    mesh = build_box_macro_mesh(_box(d), 2, m=1)
    for f in mesh.skeleton_faces:
        va = mesh.face_vertex_coords(f.owner, f.owner_face)
        vb = mesh.face_vertex_coords(f.neighbor, f.neighbor_face)
        assert np.allclose(va + f.shift, vb[f.vertex_perm], atol=1e-12)


def test_skeleton_deterministic():
    a = build_box_macro_mesh(UNIT3, 2, m=2)
    b = build_box_macro_mesh(UNIT3, 2, m=2)
    assert len(a.skeleton_faces) == len(b.skeleton_faces)
    for fa, fb in zip(a.skeleton_faces, b.skeleton_faces):
        assert (fa.owner, fa.owner_face, fa.neighbor, fa.neighbor_face) == (
            fb.owner,
            fb.owner_face,
            fb.neighbor,
            fb.neighbor_face,
        )


def test_side_index_covers_all_sides():
    mesh = build_box_macro_mesh(UNIT3, 1, m=1)
    assert len(mesh.side_index) == mesh.n_macros * 4
    for (e, f), (fid, side) in mesh.side_index.items():
        face = mesh.skeleton_faces[fid]
        ref = (face.owner, face.owner_face) if side == 0 else (
            face.neighbor,
            face.neighbor_face,
        )
        assert ref == (e, f)


def test_skeleton_recompute_matches_stored():
    mesh = build_box_macro_mesh(UNIT2, 3, m=2)
    again = skeleton(mesh)
    assert len(again) == mesh.n_skeleton_faces


@pytest.mark.parametrize("d,n,m,p", [(2, 2, 2, 3), (3, 1, 2, 2), (3, 2, 1, 3)])
def test_trace_nodes_coincide_across_sides(d, n, m, p):
    # the C0 face lattices seen from the two macros must be the same physical
    # point set after the periodic shift
    mesh = build_box_macro_mesh(_box(d), n, m=m)
    layout = macro_c0_map(m, p, d)
    for f in mesh.skeleton_faces[:: max(1, mesh.n_skeleton_faces // 20)]:
        own = mesh.to_physical(f.owner, layout.face_unique_nodes[f.owner_face])
        nbr = mesh.to_physical(f.neighbor, layout.face_unique_nodes[f.neighbor_face])
        dist = cdist(own + f.shift, nbr)
        nearest = dist.min(axis=1)
        assert nearest.max() < 1e-13 * 10
        # bijection: every neighbour node claimed exactly once
        assert len(set(dist.argmin(axis=1).tolist())) == len(own)


# ---------------------------------------------------------------------------
# macro/standard equivalence
# ---------------------------------------------------------------------------


def _centroid_set(mesh):
    cents = mesh.sub_vertices.mean(axis=2).reshape(-1, mesh.dim)
    keys = np.round(cents, 9)
    return set(map(tuple, keys))


@pytest.mark.parametrize("n,m", [(2, 2), (1, 3)])
def test_two_dimensional_subdivision_matches_fine_standard_mesh(n, m):
    # in 2D the uniform triangle subdivision is vertex-order invariant, so
    # the subdivided macro mesh IS the fine standard mesh
    coarse = build_box_macro_mesh(UNIT2, n, m=m)
    fine = build_box_macro_mesh(UNIT2, n * m, m=1)
    assert coarse.n_sub_elements == fine.n_sub_elements
    assert _centroid_set(coarse) == _centroid_set(fine)


def test_three_dimensional_subdivision_matches_fine_lattice():
    # mirrored macros subdivide with different interior diagonals than the
    # fine standard mesh, but cell count, volumes, the vertex lattice and
    # the macro faces all agree
    coarse = build_box_macro_mesh(UNIT3, 1, m=2)
    fine = build_box_macro_mesh(UNIT3, 2, m=1)
    assert coarse.n_sub_elements == fine.n_sub_elements

    def volumes(mesh):
        first = mesh.sub_vertices[:, :, 0:1, :]
        jac = np.swapaxes(mesh.sub_vertices[:, :, 1:, :] - first, -1, -2)
        return np.sort(np.linalg.det(jac).ravel())

    assert np.allclose(volumes(coarse), volumes(fine), rtol=1e-12)

    def vertex_set(mesh):
        pts = np.round(mesh.sub_vertices.reshape(-1, 3), 9)
        return set(map(tuple, pts))

    assert vertex_set(coarse) == vertex_set(fine)


# ---------------------------------------------------------------------------
# DOF accounting
# ---------------------------------------------------------------------------


def test_dof_layout_small_mesh():
    mesh = build_box_macro_mesh(UNIT3, 1, m=1)
    layout = dof_counts(mesh, p=3)
    assert layout.n_s == 5
    assert layout.nodes_per_macro == 20
    assert layout.trace_nodes_per_face == 10
    assert layout.local_dofs == 6 * 20 * 5 * 4
    assert layout.global_dofs == 12 * 10 * 5
    assert layout.effective_1d == (4, 4, 4)


@pytest.mark.parametrize(
    "n,m,n_ele,local,glob",
    [
        (10, 2, 48_000, 10_080_000, 1_680_000),
        (14, 2, 131_712, 27_659_520, 4_609_920),
        (12, 2, 82_944, 17_418_240, 2_903_040),
        (18, 2, 279_936, 58_786_560, 9_797_760),
    ],
)
def test_dof_counts_macro_columns_of_reference_tables(n, m, n_ele, local, glob):
    mesh = build_box_macro_mesh(UNIT3, n, m=m)
    layout = dof_counts(mesh, p=3, n_s=5)
    assert layout.n_elements == n_ele
    assert layout.local_dofs == local
    assert layout.global_dofs == glob


def test_dof_counts_standard_column_small():
    # same fine resolution with m=1 on one desk-scale row
    mesh = build_box_macro_mesh(UNIT3, 4, m=1)
    mesh2 = build_box_macro_mesh(UNIT3, 2, m=2)
    l1 = dof_counts(mesh, p=3, n_s=5)
    l2 = dof_counts(mesh2, p=3, n_s=5)
    assert l1.n_elements == l2.n_elements
    assert l2.global_dofs < l1.global_dofs
    assert l2.global_dofs / l1.global_dofs == pytest.approx(0.35)


# ---------------------------------------------------------------------------
# vtk export
# ---------------------------------------------------------------------------


def test_export_vtk_roundtrip_counts(tmp_path):
    mesh = build_box_macro_mesh(UNIT2, 2, m=2)
    path = tmp_path / "mesh.vtk"
    export_vtk(mesh, path)
    text = path.read_text().splitlines()
    assert text[0].startswith("# vtk DataFile")
    n_pts = int(next(l for l in text if l.startswith("POINTS")).split()[1])
    n_cells = int(next(l for l in text if l.startswith("CELLS")).split()[1])
    assert n_pts == mesh.n_sub_elements * 3
    assert n_cells == mesh.n_sub_elements


def test_write_vtk_point_data(tmp_path):
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    cells = np.array([[0, 1, 2]])
    path = tmp_path / "field.vtk"
    write_vtk(path, pts, cells, 2, point_data={"rho": np.array([1.0, 2.0, 3.0]),
                                               "vel": np.eye(3)[:, :2]})
    text = path.read_text()
    assert "SCALARS rho double 1" in text
    assert "VECTORS vel double" in text
