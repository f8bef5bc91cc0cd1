"""Structured macro-simplex meshes on axis-aligned boxes.

A box is split into a grid of cells, each cell into d! macro-simplices that
share the main diagonal (2 triangles per square, 6 tetrahedra per cube).
Every macro is a positively oriented affine image of the path simplex
{1 >= x_1 >= ... >= x_d >= 0} and is uniformly subdivided into m^d
sub-simplices.  Trace unknowns live on the skeleton, the set of macro faces;
the per-axis periodic pairing identifies opposite box sides.

The vertex split is translation invariant, so neighbouring cells induce the
same triangulation on shared faces and periodic partners match exactly.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfig, TopologyError
from .fem import kuhn_subdivision


@dataclass(frozen=True)
class SkeletonFace:
    """One skeleton face with its (up to) two incident macro sides.

    shift translates owner-side points onto neighbour-side points (zero for
    interior faces, a signed box extent on periodic pairs).  vertex_perm
    gives, for owner face vertex i, the index of the matching neighbour face
    vertex: neighbor_vertices[vertex_perm[i]] == owner_vertices[i] + shift.
    """

    owner: int
    owner_face: int
    neighbor: int | None
    neighbor_face: int | None
    shift: np.ndarray
    vertex_perm: np.ndarray | None

    @property
    def is_boundary(self):
        return self.neighbor is None


@dataclass(frozen=True)
class DofLayout:
    """Unknown counts for a mesh at degree p with n_s state components."""

    p: int
    n_s: int
    local_dofs: int
    global_dofs: int
    n_macros: int
    n_elements: int
    n_skeleton_faces: int
    nodes_per_macro: int
    trace_nodes_per_face: int
    effective_1d: tuple


@dataclass(frozen=True)
class MacroMesh:
    dim: int
    m: int
    box: np.ndarray              # (d, 2) axis extents
    n_per_dim: tuple
    periodic: tuple
    vertices: np.ndarray         # (n_points, d) cell-corner lattice
    macro_elements: np.ndarray   # (n_macros, d+1) corner ids, path order
    macro_vertices: np.ndarray   # (n_macros, d+1, d) coordinates
    macro_origins: np.ndarray    # (n_macros, d) affine offsets
    macro_jacobians: np.ndarray  # (n_macros, d, d) path-simplex jacobians
    macro_dets: np.ndarray       # (n_macros,)
    sub_reference: np.ndarray    # (m^d, d+1, d) path-simplex coordinates
    sub_vertices: np.ndarray     # (n_macros, m^d, d+1, d) physical
    skeleton_faces: list = field(default_factory=list)
    side_index: dict = field(default_factory=dict)

    @property
    def n_macros(self):
        return len(self.macro_elements)

    @property
    def n_sub_elements(self):
        return self.n_macros * len(self.sub_reference)

    @property
    def n_skeleton_faces(self):
        return len(self.skeleton_faces)

    @property
    def boundary_faces(self):
        return [f for f in self.skeleton_faces if f.is_boundary]

    @property
    def periodic_pairs(self):
        return [
            (
                (f.owner, f.owner_face),
                (f.neighbor, f.neighbor_face),
                f.shift,
            )
            for f in self.skeleton_faces
            if not f.is_boundary and np.any(f.shift != 0.0)
        ]

    def face_vertex_coords(self, macro, local_face):
        """Physical coordinates of the d vertices of one macro face."""
        keep = [k for k in range(self.dim + 1) if k != local_face]
        return self.macro_vertices[macro, keep]

    def to_physical(self, macro, reference_points):
        """Map path-simplex coordinates into the given macro."""
        return self.macro_origins[macro] + reference_points @ self.macro_jacobians[macro].T


def _perm_parity(perm):
    inversions = sum(
        1
        for i in range(len(perm))
        for j in range(i + 1, len(perm))
        if perm[i] > perm[j]
    )
    return inversions % 2


def _as_axis_tuple(value, d, name, dtype):
    if np.isscalar(value) or isinstance(value, bool):
        items = (value,) * d
    else:
        items = tuple(value)
        if len(items) != d:
            raise InvalidConfig(f"{name} needs 1 or {d} entries, got {len(items)}")
    return tuple(dtype(v) for v in items)


def build_box_macro_mesh(box, n_per_dim, m, periodic=True):
    """Build the macro mesh of a box: n^d cells, d! macros each, m-subdivided."""
    box = np.atleast_2d(np.asarray(box, dtype=float))
    d = len(box)
    if d not in (2, 3) or box.shape != (d, 2):
        raise InvalidConfig(f"box must be (d, 2) extents with d in {{2, 3}}, got {box.shape}")
    if np.any(box[:, 1] <= box[:, 0]):
        raise InvalidConfig("degenerate box: every axis needs max > min")
    n_axis = _as_axis_tuple(n_per_dim, d, "n_per_dim", int)
    if min(n_axis) < 1:
        raise InvalidConfig(f"n_per_dim must be >= 1, got {n_axis}")
    if m < 1 or int(m) != m:
        raise InvalidConfig(f"subdivision count must be a positive integer, got {m}")
    flags = _as_axis_tuple(periodic, d, "periodic", bool)

    lo = box[:, 0]
    h = (box[:, 1] - box[:, 0]) / np.array(n_axis)

    # corner lattice, including the max side (periodic identification is done
    # on the skeleton, not by fusing vertices)
    axes = [lo[a] + h[a] * np.arange(n_axis[a] + 1) for a in range(d)]
    grids = np.meshgrid(*axes, indexing="ij")
    vertices = np.stack([g.ravel() for g in grids], axis=-1)
    strides = np.array(
        [int(np.prod([n_axis[b] + 1 for b in range(a + 1, d)])) for a in range(d)]
    )

    perms = sorted(itertools.permutations(range(d)))
    macro_elements = []
    for cell in itertools.product(*(range(n) for n in n_axis)):
        base = np.array(cell)
        for perm in perms:
            idx = np.empty(d + 1, dtype=np.int64)
            acc = base.copy()
            idx[0] = acc @ strides
            for k, axis in enumerate(perm):
                acc = acc.copy()
                acc[axis] += 1
                idx[k + 1] = acc @ strides
            if _perm_parity(perm):
                idx[[d - 1, d]] = idx[[d, d - 1]]
            macro_elements.append(idx)
    macro_elements = np.array(macro_elements)
    macro_vertices = vertices[macro_elements]

    # affine maps from the path simplex: jacobian columns are successive
    # vertex differences
    macro_origins = macro_vertices[:, 0, :]
    macro_jacobians = np.stack(
        [macro_vertices[:, k + 1, :] - macro_vertices[:, k, :] for k in range(d)],
        axis=-1,
    )
    macro_dets = np.linalg.det(macro_jacobians)
    if np.any(macro_dets <= 0):
        raise InvalidConfig("macro orientation fix failed, non-positive jacobian")

    sub_reference = kuhn_subdivision(m, d)
    sub_vertices = (
        np.einsum("eab,skb->eska", macro_jacobians, sub_reference)
        + macro_origins[:, None, None, :]
    )

    mesh = MacroMesh(
        dim=d,
        m=int(m),
        box=box,
        n_per_dim=n_axis,
        periodic=flags,
        vertices=vertices,
        macro_elements=macro_elements,
        macro_vertices=macro_vertices,
        macro_origins=macro_origins,
        macro_jacobians=macro_jacobians,
        macro_dets=macro_dets,
        sub_reference=sub_reference,
        sub_vertices=sub_vertices,
    )
    faces = skeleton(mesh)
    mesh.skeleton_faces.extend(faces)
    for fid, f in enumerate(faces):
        mesh.side_index[(f.owner, f.owner_face)] = (fid, 0)
        if not f.is_boundary:
            mesh.side_index[(f.neighbor, f.neighbor_face)] = (fid, 1)
    return mesh


def skeleton(mesh):
    """Deduplicate macro faces into skeleton faces with orientation maps.

    Faces on the max side of a periodic axis are shifted back by the extent
    before matching, which pairs opposite box sides.  Raises TopologyError
    if more than two sides ever coincide.
    """
    d = mesh.dim
    extent = mesh.box[:, 1] - mesh.box[:, 0]
    quantum = 1e-10 * float(np.max(extent))
    n_macros = mesh.n_macros
    face_ids = np.array(
        [[k for k in range(d + 1) if k != f] for f in range(d + 1)]
    )

    # all (macro, local_face) sides with wrapped vertex coordinates
    side_verts = mesh.macro_vertices[:, face_ids, :]          # (e, d+1, d, d)
    side_verts = side_verts.reshape(n_macros * (d + 1), d, d)
    wrapped = side_verts.copy()
    for a in range(d):
        if not mesh.periodic[a]:
            continue
        on_max = np.all(np.abs(side_verts[:, :, a] - mesh.box[a, 1]) < quantum, axis=1)
        wrapped[on_max, :, a] -= extent[a]

    # canonical integer key: per-side vertices sorted lexicographically
    keys = np.round(wrapped / quantum).astype(np.int64)
    fields = [(f"c{k}", np.int64) for k in range(d)]
    structured = np.ascontiguousarray(keys).view(fields).reshape(len(keys), d)
    structured = np.sort(structured, axis=1)
    flat_keys = structured.view(np.int64).reshape(len(keys), d * d)
    _, group_of, counts = np.unique(
        flat_keys, axis=0, return_inverse=True, return_counts=True
    )
    if counts.max() > 2:
        raise TopologyError(
            f"{int((counts > 2).sum())} face groups have more than two sides"
        )

    order = np.argsort(group_of, kind="stable")
    grouped = {}
    for side in order:
        grouped.setdefault(int(group_of[side]), []).append(int(side))

    faces = []
    pending = sorted(grouped.values())
    for sides in sorted(pending, key=lambda s: s[0]):
        e0, f0 = divmod(sides[0], d + 1)
        if len(sides) == 1:
            faces.append(
                SkeletonFace(e0, f0, None, None, np.zeros(d), None)
            )
            continue
        e1, f1 = divmod(sides[1], d + 1)
        va = mesh.face_vertex_coords(e0, f0)
        vb = mesh.face_vertex_coords(e1, f1)
        delta = vb.mean(axis=0) - va.mean(axis=0)
        shift = np.round(delta / extent) * extent
        vb_back = vb - shift
        perm = np.full(d, -1, dtype=np.int64)
        for i in range(d):
            dist = np.linalg.norm(vb_back - va[i], axis=1)
            j = int(np.argmin(dist))
            if dist[j] > quantum:
                raise TopologyError(
                    f"face vertices of macros {e0}/{e1} do not match after shift"
                )
            perm[i] = j
        if len(set(perm.tolist())) != d:
            raise TopologyError(
                f"degenerate vertex matching between macros {e0} and {e1}"
            )
        faces.append(SkeletonFace(e0, f0, e1, f1, shift, perm))
    return faces


def dof_counts(mesh, p, n_s=None):
    """Local (volume) and global (trace) unknown counts at degree p."""
    d = mesh.dim
    n_s = int(n_s) if n_s is not None else d + 2
    mp = mesh.m * p
    nodes_per_macro = math.comb(mp + d, d)
    trace_nodes = math.comb(mp + d - 1, d - 1)
    local = mesh.n_macros * nodes_per_macro * n_s * (1 + d)
    glob = mesh.n_skeleton_faces * trace_nodes * n_s
    return DofLayout(
        p=p,
        n_s=n_s,
        local_dofs=local,
        global_dofs=glob,
        n_macros=mesh.n_macros,
        n_elements=mesh.n_sub_elements,
        n_skeleton_faces=mesh.n_skeleton_faces,
        nodes_per_macro=nodes_per_macro,
        trace_nodes_per_face=trace_nodes,
        effective_1d=tuple(n * (mp + 1) for n in mesh.n_per_dim),
    )


def write_vtk(path, points, cells, dim, point_data=None):
    """Legacy ASCII VTK unstructured grid (triangles or tetrahedra)."""
    points = np.asarray(points, dtype=float)
    cells = np.asarray(cells, dtype=np.int64)
    if points.shape[1] == 2:
        points = np.hstack([points, np.zeros((len(points), 1))])
    cell_type = {2: 5, 3: 10}[dim]
    lines = [
        "# vtk DataFile Version 3.0",
        "macrohdg unstructured grid",
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {len(points)} double",
    ]
    lines += [" ".join(f"{x:.16g}" for x in pt) for pt in points]
    nv = cells.shape[1]
    lines.append(f"CELLS {len(cells)} {len(cells) * (nv + 1)}")
    lines += [f"{nv} " + " ".join(map(str, row)) for row in cells]
    lines.append(f"CELL_TYPES {len(cells)}")
    lines += [str(cell_type)] * len(cells)
    if point_data:
        lines.append(f"POINT_DATA {len(points)}")
        for name, values in point_data.items():
            values = np.asarray(values, dtype=float)
            if values.ndim == 1:
                lines.append(f"SCALARS {name} double 1")
                lines.append("LOOKUP_TABLE default")
                lines += [f"{v:.16g}" for v in values]
            else:
                if values.shape[1] == 2:
                    values = np.hstack([values, np.zeros((len(values), 1))])
                lines.append(f"VECTORS {name} double")
                lines += [" ".join(f"{x:.16g}" for x in row) for row in values]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def export_vtk(mesh, path):
    """Write the sub-element mesh for inspection."""
    d = mesh.dim
    pts = mesh.sub_vertices.reshape(-1, d)
    n_cells = mesh.n_sub_elements
    cells = np.arange(n_cells * (d + 1)).reshape(n_cells, d + 1)
    write_vtk(path, pts, cells, d)
