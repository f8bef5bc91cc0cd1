"""Discrete residuals and linearizations of the macro-element trace method.

Unknowns per macro-element: the working variable w (conservative state u or
entropy variables v) and, for viscous runs, its discrete gradient q, both as
nodal coefficients of the C0 space over the m-fold subdivided macro.  Trace
unknowns live on skeleton faces as C0 nodal coefficients of the face lattice,
stored once per face in the owner side's ordering.

Sign conventions fixed here:
  q = grad(w) weakly:    R_Q = (phi, q) + (d_b phi, w) - <phi, w_hat n_b>
  balance law:           R_V = (phi, du/dt) - (grad phi, F + G) + <phi, Fhat + Ghat>
  flux continuity:       R_Vhat = sum over the two sides of <mu, Fhat + Ghat>

The Jacobian is kept as quadrature-point linearization tensors plus geometric
operators; only the per-macro condensed matrix S = A_vv - A_vq A_qq^-1 A_qv
and the mass matrix are factored.  Everything else is applied matrix free.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, lu_factor, lu_solve
from scipy.sparse import csc_matrix
from scipy.sparse.linalg import splu
from scipy.spatial.distance import cdist

from .errors import (
    InvalidConfig,
    NonAdmissibleState,
    SingularBlock,
    SingularLocalMatrix,
)
from .fem import ReferenceBasis, face_embedding, macro_c0_map
from .fluxes import (
    DissipationSpec,
    interface_flux,
    entropy_flux_residual,
    viscous_numerical_flux,
)
from .gas import GasModel, complex_step_jacobian

log = logging.getLogger(__name__)


@dataclass
class FieldSet:
    """Nodal coefficients: w per macro, trace per skeleton face, q if viscous."""

    w: np.ndarray                 # (E, n_c0, n_s)
    trace: np.ndarray             # (n_faces, n_trace_nodes, n_s)
    q: np.ndarray | None = None   # (E, n_c0, n_s, d)

    def copy(self):
        return FieldSet(
            self.w.copy(),
            self.trace.copy(),
            None if self.q is None else self.q.copy(),
        )


@dataclass
class ResidualSet:
    r_w: np.ndarray
    r_trace: np.ndarray
    r_q: np.ndarray | None = None

    def norm(self):
        parts = [self.r_w, self.r_trace]
        if self.r_q is not None:
            parts.append(self.r_q)
        return math.sqrt(sum(float(np.vdot(p, p).real) for p in parts))

    def max_abs(self):
        parts = [self.r_w, self.r_trace]
        if self.r_q is not None:
            parts.append(self.r_q)
        return max(float(np.abs(p).max()) for p in parts)


@dataclass(frozen=True)
class StageContext:
    """Temporal contribution: residual gets alpha * u(w) + offset at volume
    quadrature points (offset has the layout of volume_quad_states)."""

    alpha: float
    offset: np.ndarray | None = None
    dt: float | None = None


@dataclass(frozen=True)
class FreeStream:
    """Far-field state imposed on non-periodic boundary faces."""

    state: np.ndarray


def boundary_trace_operator(kind, state=None):
    """Validate the boundary treatment: 'periodic' or a FreeStream state."""
    if kind == "periodic":
        return None
    if kind == "freestream":
        if state is None:
            raise InvalidConfig("freestream boundary needs a state")
        return FreeStream(np.asarray(state, dtype=float))
    raise InvalidConfig(f"unsupported boundary kind {kind!r}")


class Discretization:
    """Spatial discretization on a macro mesh at degree p.

    formulation 'conservative' evolves u; 'entropy' evolves the entropy
    variables v.  viscosity None gives the inviscid system without gradient
    unknowns.  boundary is None (fully periodic) or a FreeStream.
    """

    def __init__(self, mesh, p, gas=None, formulation="entropy",
                 flux=None, viscosity=None, quad_degree=None,
                 boundary=None, supg=False):
        if formulation not in ("conservative", "entropy"):
            raise InvalidConfig(f"unknown formulation {formulation!r}")
        self.mesh = mesh
        self.p = p
        self.gas = gas or GasModel()
        self.formulation = formulation
        self.flux = flux or DissipationSpec("kepes")
        self.viscosity = viscosity
        self.supg = bool(supg)
        if supg and formulation != "conservative":
            raise InvalidConfig("interior stabilization applies to the "
                                "conservative formulation only")
        if mesh.boundary_faces and boundary is None:
            raise InvalidConfig("mesh has boundary faces, a boundary "
                                "treatment is required")
        self.boundary = boundary

        d = mesh.dim
        self.d = d
        self.n_s = d + 2
        self.basis = ReferenceBasis(p, d, quad_degree)
        self.layout = macro_c0_map(mesh.m, p, d, self.basis)
        self._build_volume_tables()
        self._build_face_tables()
        self._build_trace_connectivity()
        if self.viscosity is not None:
            self._build_gradient_operators()

    # ------------------------------------------------------------------
    # precomputed tables
    # ------------------------------------------------------------------

    def _build_volume_tables(self):
        mesh, basis, layout = self.mesh, self.basis, self.layout
        d = self.d
        E = mesh.n_macros
        n_sub = layout.n_sub
        nq = len(basis.quad_wts)

        sub_v = mesh.sub_vertices                       # (E, n_sub, d+1, d)
        jac = np.stack(
            [sub_v[:, :, k + 1, :] - sub_v[:, :, 0, :] for k in range(d)],
            axis=-1,
        )                                               # (E, n_sub, d, d)
        det = np.linalg.det(jac)
        if np.any(det <= 0):
            raise InvalidConfig("negative sub-element jacobian")
        inv_jac = np.linalg.inv(jac)
        self.vol_w = basis.quad_wts[None, None, :] * det[:, :, None]
        # physical gradients: d phi/dx_a = d phi/d xi_k * (J^-1)[k, a]
        self.dphi_phys = np.einsum("qik,eska->esqia", basis.dphi, inv_jac)
        self.phi = basis.phi
        # physical quadrature coordinates
        ref_q = basis.quad_pts                          # (nq, d)
        sub_origin = sub_v[:, :, 0, :]
        self.quad_coords = (
            np.einsum("esab,qb->esqa", jac, ref_q) + sub_origin[:, :, None, :]
        )
        self.node_coords = (
            np.einsum("eab,nb->ena", mesh.macro_jacobians, layout.unique_nodes)
            + mesh.macro_origins[:, None, :]
        )
        self.domain_volume = float(np.prod(mesh.box[:, 1] - mesh.box[:, 0]))
        # sub-element diameter per macro (for optional stabilization)
        edges = sub_v[:, :, 1:, :] - sub_v[:, :, :1, :]
        self.sub_h = np.linalg.norm(edges, axis=-1).max(axis=-1)

    def _build_face_tables(self):
        mesh, basis, layout = self.mesh, self.basis, self.layout
        d = self.d
        E = mesh.n_macros
        facet = basis.facet
        nqf = len(facet.quad_wts)

        # flatten (macro face, tile) into one side-tile list; tiles are
        # reference-level, identical for every macro
        st_face, st_sub, st_subface = [], [], []
        st_face_scatter = []
        for f in range(d + 1):
            for t, (s, fl) in enumerate(layout.face_tiles[f]):
                st_face.append(f)
                st_sub.append(s)
                st_subface.append(fl)
                st_face_scatter.append(layout.face_scatter[f][t])
        self.n_st = len(st_face)
        self.st_face = np.array(st_face)
        self.st_sub = np.array(st_sub)
        self.st_face_scatter = np.array(st_face_scatter)   # (n_st, n_facet_nodes)

        # volume basis at each sub-face's quadrature points, restricted to
        # the nodes on that face
        self.phi_face = []
        self.face_rows = []     # (n_st, n_face_nb) ids into the macro C0 space
        emb_cache = {}
        for k in range(self.n_st):
            fl = st_subface[k]
            if fl not in emb_cache:
                v0, span = face_embedding(d, fl)
                pts = v0 + facet.quad_pts @ span.T
                cols = basis.face_nodes[fl]
                emb_cache[fl] = (basis.eval_at(pts)[:, cols], cols)
            table, cols = emb_cache[fl]
            self.phi_face.append(table)
            self.face_rows.append(layout.scatter[st_sub[k]][cols])
        self.face_rows = np.array(self.face_rows)
        self.fphi = facet.phi                               # (nqf, n_facet_nodes)

        # physical normals, measures and quadrature weights per side tile
        sub_v = mesh.sub_vertices
        normals = np.empty((E, self.n_st, d))
        areas = np.empty((E, self.n_st))
        fverts_all = [
            [i for i in range(d + 1) if i != k] for k in range(d + 1)
        ]
        for k in range(self.n_st):
            s, fl = st_sub[k], st_subface[k]
            pts = sub_v[:, s, fverts_all[fl], :]            # (E, d, d)
            if d == 2:
                tang = pts[:, 1] - pts[:, 0]
                nvec = np.stack([tang[:, 1], -tang[:, 0]], axis=-1)
                areas[:, k] = np.linalg.norm(tang, axis=-1)
            else:
                nvec = np.cross(pts[:, 1] - pts[:, 0], pts[:, 2] - pts[:, 0])
                areas[:, k] = 0.5 * np.linalg.norm(nvec, axis=-1)
            nvec = nvec / np.linalg.norm(nvec, axis=-1, keepdims=True)
            centroid = sub_v[:, s].mean(axis=1)
            sign = np.sign(
                np.sum(nvec * (pts[:, 0] - centroid), axis=-1)
            )[:, None]
            normals[:, k] = nvec * sign
            # quadrature points in physical space
        self.face_normals = normals
        self.face_w = (
            facet.quad_wts[None, None, :]
            * areas[:, :, None]
            * math.factorial(d - 1)
        )
        fq = []
        for k in range(self.n_st):
            s, fl = st_sub[k], st_subface[k]
            v0, span = face_embedding(d, fl)
            ref_pts = v0 + facet.quad_pts @ span.T          # unit-sub coords
            sub_jac = np.stack(
                [sub_v[:, s, i + 1, :] - sub_v[:, s, 0, :] for i in range(d)],
                axis=-1,
            )
            fq.append(
                np.einsum("eab,qb->eqa", sub_jac, ref_pts)
                + sub_v[:, s, 0, :][:, None, :]
            )
        self.face_quad_coords = np.stack(fq, axis=1)        # (E, n_st, nqf, d)

    def _build_trace_connectivity(self):
        mesh, layout = self.mesh, self.layout
        d = self.d
        E = mesh.n_macros
        n_t = layout.n_face_unique
        extent = float(np.max(mesh.box[:, 1] - mesh.box[:, 0]))
        tol = 1e-8 * extent

        self.n_faces = mesh.n_skeleton_faces
        face_id = np.zeros((E, d + 1), dtype=np.int64)
        boundary = np.zeros((E, d + 1), dtype=bool)
        trace_perm = np.zeros((E, d + 1, n_t), dtype=np.int64)
        trace_coords = np.zeros((self.n_faces, n_t, d))

        for fid, face in enumerate(mesh.skeleton_faces):
            own_pts = mesh.to_physical(
                face.owner, layout.face_unique_nodes[face.owner_face]
            )
            trace_coords[fid] = own_pts
            face_id[face.owner, face.owner_face] = fid
            trace_perm[face.owner, face.owner_face] = np.arange(n_t)
            if face.is_boundary:
                boundary[face.owner, face.owner_face] = True
                continue
            nb_pts = mesh.to_physical(
                face.neighbor, layout.face_unique_nodes[face.neighbor_face]
            )
            dist = cdist(nb_pts - face.shift, own_pts)
            match = dist.argmin(axis=1)
            if dist[np.arange(n_t), match].max() > tol or len(set(match)) != n_t:
                raise InvalidConfig(
                    f"trace nodes of skeleton face {fid} do not match"
                )
            face_id[face.neighbor, face.neighbor_face] = fid
            trace_perm[face.neighbor, face.neighbor_face] = match
        self.face_id = face_id
        self.boundary_side = boundary
        self.trace_coords = trace_coords
        # combined gather: storage index of facet node kf of side tile k
        self.trace_idx = np.empty((E, self.n_st, self.st_face_scatter.shape[1]),
                                  dtype=np.int64)
        for k in range(self.n_st):
            f = self.st_face[k]
            self.trace_idx[:, k, :] = np.take_along_axis(
                trace_perm[:, f, :],
                self.st_face_scatter[k][None, :].repeat(E, axis=0),
                axis=1,
            )
        self.face_id_st = face_id[:, self.st_face]          # (E, n_st)
        self.boundary_st = boundary[:, self.st_face]

    def _build_gradient_operators(self):
        """Geometric operators of the gradient equation (state independent)."""
        E = self.mesh.n_macros
        nc = self.layout.n_unique
        d = self.d
        mass = np.zeros((E, nc, nc))
        stiff = np.zeros((E, d, nc, nc))
        for s in range(self.layout.n_sub):
            ids = self.layout.scatter[s]
            mloc = np.einsum(
                "eq,qi,qj->eij", self.vol_w[:, s], self.phi, self.phi
            )
            kloc = np.einsum(
                "eq,eqjb,qi->ebji",
                self.vol_w[:, s],
                self.dphi_phys[:, s],
                self.phi,
            )
            ix = ids[:, None]
            jx = ids[None, :]
            np.add.at(mass, (np.s_[:], ix, jx), mloc)
            np.add.at(stiff, (np.s_[:], np.s_[:], ix, jx), kloc)
        self.mass = mass
        self.stiff = stiff                                  # K_b[j, i]
        self.mass_factor = [cho_factor(mass[e]) for e in range(E)]
        # P_b = M^-1 K_b, used when folding the gradient block into S
        self.mass_inv_stiff = np.stack(
            [
                np.stack([cho_solve(self.mass_factor[e], stiff[e, b])
                          for b in range(d)])
                for e in range(E)
            ]
        )
        # boundary coupling of the gradient equation: -<phi, mu n_b> per tile
        nfn = self.face_rows.shape[1]
        ntf = self.fphi.shape[1]
        edge = np.empty((E, self.n_st, nfn, ntf, d))
        for k in range(self.n_st):
            edge[:, k] = np.einsum(
                "eq,qi,qj,eb->eijb",
                self.face_w[:, k],
                self.phi_face[k],
                self.fphi,
                self.face_normals[:, k],
            )
        self.face_edge_op = edge

    # ------------------------------------------------------------------
    # state handling
    # ------------------------------------------------------------------

    def to_conservative(self, w, where=""):
        if self.formulation == "conservative":
            return w
        return self.gas.from_entropy(w, where=where)

    def from_conservative(self, u):
        if self.formulation == "conservative":
            return u
        return self.gas.entropy_vars(u)

    def project(self, state_fn):
        """Interpolate an exact conservative-state function onto the fields."""
        u_nodes = state_fn(self.node_coords)
        w = self.from_conservative(u_nodes)
        u_trace = state_fn(self.trace_coords)
        trace = self.from_conservative(u_trace)
        fields = FieldSet(w=w, trace=trace)
        if self.viscosity is not None:
            fields.q = self.solve_gradient(fields)
        return fields

    def solve_gradient(self, fields):
        """Discrete gradient of w given the trace: M q_b = E_b what - K_b w."""
        E = self.mesh.n_macros
        nc = self.layout.n_unique
        rhs = -np.einsum("ebji,eit->ejtb", self.stiff, fields.w)
        for k in range(self.n_st):
            tr = self._gather_trace(fields.trace, k)
            contrib = np.einsum("eijb,ejt->eitb", self.face_edge_op[:, k], tr)
            np.add.at(rhs, (np.s_[:], self.face_rows[k]), contrib)
        q = np.empty_like(rhs)
        for e in range(E):
            q[e] = cho_solve(self.mass_factor[e],
                             rhs[e].reshape(nc, -1)).reshape(rhs[e].shape)
        return q

    def _gather_trace(self, trace, k):
        """Trace coefficients of side tile k in side-local facet order."""
        return trace[self.face_id_st[:, k][:, None], self.trace_idx[:, k]]

    def volume_quad_states(self, fields):
        """Conservative state at every volume quadrature point."""
        E = self.mesh.n_macros
        n_sub = self.layout.n_sub
        nq = self.phi.shape[0]
        out = np.empty((E, n_sub, nq, self.n_s), dtype=fields.w.dtype)
        for s in range(n_sub):
            w_q = np.einsum("qi,eis->eqs", self.phi, fields.w[:, self.layout.scatter[s]])
            out[:, s] = self.to_conservative(w_q, where=f"volume sub {s}")
        return out

    def _check_states(self, u, where):
        rho = np.real(u[..., 0])
        pressure = np.real(self.gas.pressure(u))
        if np.all(rho > 0) and np.all(pressure > 0):
            return
        bad = np.nonzero(~((rho > 0) & (pressure > 0)))
        raise NonAdmissibleState(
            f"non-admissible state at {where}, first at index "
            f"{tuple(int(b[0]) for b in bad)}",
            where=where,
        )

    # ------------------------------------------------------------------
    # residuals
    # ------------------------------------------------------------------

    def _viscous_face_flux(self, w_q, q_q, u_q, normal):
        """Interior viscous normal flux at face quadrature points."""
        vp = self.viscosity
        if self.formulation == "entropy":
            grad_vel, grad_tmp = self.gas.velocity_temperature_gradients_entropy(
                w_q, q_q
            )
        else:
            grad_vel, grad_tmp = self.gas.velocity_temperature_gradients(
                w_q, q_q
            )
        vel = self.gas.primitive(u_q)[1]
        g_full = self.gas.viscous_flux(vp, vel, grad_vel, grad_tmp)
        return np.einsum("...sa,...a->...s", g_full, normal)

    def residuals(self, fields, stage=None, check=True):
        gas = self.gas
        E = self.mesh.n_macros
        layout = self.layout
        dtype = np.result_type(fields.w, fields.trace, float)
        r_w = np.zeros((E, layout.n_unique, self.n_s), dtype=dtype)
        r_tr = np.zeros_like(fields.trace, dtype=dtype)
        viscous = self.viscosity is not None
        r_q = np.zeros((E, layout.n_unique, self.n_s, self.d), dtype=dtype) \
            if viscous else None

        # volume terms
        for s in range(layout.n_sub):
            ids = layout.scatter[s]
            w_q = np.einsum("qi,eis->eqs", self.phi, fields.w[:, ids])
            u_q = self.to_conservative(w_q, where=f"volume sub {s}")
            if check:
                self._check_states(u_q, f"volume sub {s}")
            wv = self.vol_w[:, s]
            flux = gas.flux(u_q)                            # (E, nq, n_s, d)
            if viscous:
                q_q = np.einsum("qi,eitb->eqtb", self.phi, fields.q[:, ids])
                if self.formulation == "entropy":
                    gv, gt = gas.velocity_temperature_gradients_entropy(w_q, q_q)
                else:
                    gv, gt = gas.velocity_temperature_gradients(w_q, q_q)
                vel = gas.primitive(u_q)[1]
                flux = flux + gas.viscous_flux(self.viscosity, vel, gv, gt)
                r_q[:, ids] += np.einsum("eq,qi,eqtb->eitb", wv, self.phi, q_q)
                r_q[:, ids] += np.einsum("eq,eqib,eqt->eitb",
                                         wv, self.dphi_phys[:, s], w_q)
            r_w[:, ids] -= np.einsum("eq,eqia,eqsa->eis",
                                     wv, self.dphi_phys[:, s], flux)
            if stage is not None:
                temporal = stage.alpha * u_q
                if stage.offset is not None:
                    temporal = temporal + stage.offset[:, s]
                r_w[:, ids] += np.einsum("eq,qi,eqs->eis", wv, self.phi, temporal)
            if self.supg:
                r_w[:, ids] += self._supg_residual(s, fields.w[:, ids], u_q,
                                                   stage)

        # face terms
        for k in range(self.n_st):
            rows = self.face_rows[k]
            w_q = np.einsum("qi,eis->eqs", self.phi_face[k], fields.w[:, rows])
            tr = self._gather_trace(fields.trace, k)
            wh_q = np.einsum("qi,eis->eqs", self.fphi, tr)
            u_q = self.to_conservative(w_q, where=f"face tile {k}")
            uh_q = self.to_conservative(wh_q, where=f"trace tile {k}")
            if check:
                self._check_states(u_q, f"face tile {k}")
                self._check_states(uh_q, f"trace tile {k}")
            normal = self.face_normals[:, k][:, None, :]
            total = interface_flux(self.gas, self.flux, u_q, uh_q, normal)
            if viscous:
                q_q = np.einsum("qi,eitb->eqtb", self.phi_face[k],
                                fields.q[:, rows])
                g_n = self._viscous_face_flux(w_q, q_q, u_q, normal)
                total = total + viscous_numerical_flux(
                    self.gas, self.viscosity, g_n, w_q, wh_q
                )
                r_q[:, rows] -= np.einsum("eq,qi,eqt,eb->eitb",
                                          self.face_w[:, k], self.phi_face[k],
                                          wh_q, self.face_normals[:, k])
            r_w[:, rows] += np.einsum("eq,qi,eqs->eis",
                                      self.face_w[:, k], self.phi_face[k], total)
            vals = np.einsum("eq,qi,eqs->eis", self.face_w[:, k], self.fphi, total)
            if self.boundary is not None:
                mask = self.boundary_st[:, k]
                if mask.any():
                    u_inf = np.broadcast_to(
                        self.boundary.state, uh_q[mask].shape
                    )
                    ghost = interface_flux(self.gas, self.flux, u_inf,
                                           uh_q[mask], -normal[mask])
                    if viscous:
                        w_inf = self.from_conservative(
                            np.asarray(self.boundary.state, dtype=dtype)
                        )
                        ghost = ghost + viscous_numerical_flux(
                            self.gas, self.viscosity, np.zeros_like(ghost),
                            np.broadcast_to(w_inf, wh_q[mask].shape),
                            wh_q[mask],
                        )
                    vals[mask] += np.einsum("eq,qi,eqs->eis",
                                            self.face_w[mask][:, k], self.fphi,
                                            ghost)
            np.add.at(r_tr, (self.face_id_st[:, k][:, None],
                             self.trace_idx[:, k]), vals)
        return ResidualSet(r_w=r_w, r_trace=r_tr, r_q=r_q)

    def _supg_transport(self, s, u_q, stage):
        """Frozen streamline coefficients: transport jacobians A_a (real part)
        and tau = (2|V|/h + 2/dt + 4 nu/h^2)^-1 per quadrature point."""
        gas = self.gas
        dirs = np.eye(self.d)
        a_mats = np.stack(
            [
                complex_step_jacobian(
                    lambda uu, a=a: gas.flux_normal(uu, dirs[a]),
                    np.real(u_q),
                )
                for a in range(self.d)
            ],
            axis=-3,
        )                                             # (E, nq, d, out, in)
        vel = gas.primitive(np.real(u_q))[1]
        speed = np.sqrt(np.sum(vel**2, axis=-1))
        h = self.sub_h[:, s][:, None]
        denom = 2.0 * speed / h
        if stage is not None and stage.dt:
            denom = denom + 2.0 / stage.dt
        if self.viscosity is not None:
            denom = denom + 4.0 * self.viscosity.shear_coefficient() / h**2
        return a_mats, 1.0 / denom

    def _supg_residual(self, s, u_nodes, u_q, stage):
        """Optional streamline term, conservative form only: test function
        A_a^T grad phi against the strong residual with frozen A_a, tau."""
        a_mats, tau = self._supg_transport(s, u_q, stage)
        dphi = self.dphi_phys[:, s]
        grad_u = np.einsum("eqia,eit->eqta", dphi, u_nodes)
        strong = np.einsum("eqast,eqta->eqs", a_mats, grad_u)
        if stage is not None:
            strong = strong + stage.alpha * u_q
            if stage.offset is not None:
                strong = strong + stage.offset[:, s]
        test = np.einsum("eqast,eqia->eqist", a_mats, dphi)
        return np.einsum("eq,eqist,eq,eqt->eis",
                         self.vol_w[:, s], test, tau, strong)

    # ------------------------------------------------------------------
    # monitors and norms
    # ------------------------------------------------------------------

    def integrals(self, fields):
        """Volume integrals: generalized entropy, thermodynamic entropy,
        kinetic energy, mass, total energy."""
        gas = self.gas
        out = {"entropy": 0.0, "thermo_entropy": 0.0, "kinetic_energy": 0.0,
               "mass": 0.0, "total_energy": 0.0}
        for s in range(self.layout.n_sub):
            ids = self.layout.scatter[s]
            w_q = np.einsum("qi,eis->eqs", self.phi, fields.w[:, ids])
            u_q = self.to_conservative(w_q)
            wv = self.vol_w[:, s]
            rho, vel, _ = gas.primitive(u_q)
            out["entropy"] += float(np.sum(wv * gas.entropy_density(u_q)))
            out["thermo_entropy"] += float(
                np.sum(wv * rho * gas.specific_entropy(u_q))
            )
            out["kinetic_energy"] += float(
                np.sum(wv * 0.5 * rho * np.sum(vel**2, axis=-1))
            )
            out["mass"] += float(np.sum(wv * rho))
            out["total_energy"] += float(np.sum(wv * u_q[..., -1]))
        return out

    def total_generalized_entropy(self, fields):
        vals = self.integrals(fields)
        return vals["entropy"], vals["thermo_entropy"]

    def kinetic_energy_dissipation(self, fields):
        """eps = (2 mu_eff / |Omega|) * integral of rho |curl V|^2 / 2."""
        if self.viscosity is None:
            raise InvalidConfig("dissipation rate needs a viscous setup")
        gas = self.gas
        total = 0.0
        for s in range(self.layout.n_sub):
            ids = self.layout.scatter[s]
            w_q = np.einsum("qi,eis->eqs", self.phi, fields.w[:, ids])
            q_q = np.einsum("qi,eitb->eqtb", self.phi, fields.q[:, ids])
            u_q = self.to_conservative(w_q)
            if self.formulation == "entropy":
                gv, _ = gas.velocity_temperature_gradients_entropy(w_q, q_q)
            else:
                gv, _ = gas.velocity_temperature_gradients(w_q, q_q)
            rho = gas.primitive(u_q)[0]
            if self.d == 2:
                omega2 = (gv[..., 1, 0] - gv[..., 0, 1]) ** 2
            else:
                wx = gv[..., 2, 1] - gv[..., 1, 2]
                wy = gv[..., 0, 2] - gv[..., 2, 0]
                wz = gv[..., 1, 0] - gv[..., 0, 1]
                omega2 = wx**2 + wy**2 + wz**2
            total += float(np.sum(self.vol_w[:, s] * 0.5 * rho * omega2))
        mu = self.viscosity.shear_coefficient()
        return 2.0 * mu * total / self.domain_volume

    def entropy_identity_defect(self, fields):
        """Check sum(v . R_V) - sum(vhat . R_Vhat) = -sum of face entropy
        residuals; returns (lhs, rhs, defect)."""
        res = self.residuals(fields, stage=None)
        if self.formulation == "entropy":
            v = fields.w
            v_hat = fields.trace
        else:
            v = self.gas.entropy_vars(fields.w)
            v_hat = self.gas.entropy_vars(fields.trace)
        lhs = float(np.sum(v * res.r_w)) - float(np.sum(v_hat * res.r_trace))
        rhs = 0.0
        for k in range(self.n_st):
            rows = self.face_rows[k]
            w_q = np.einsum("qi,eis->eqs", self.phi_face[k], fields.w[:, rows])
            tr = self._gather_trace(fields.trace, k)
            wh_q = np.einsum("qi,eis->eqs", self.fphi, tr)
            u_q = self.to_conservative(w_q)
            uh_q = self.to_conservative(wh_q)
            normal = self.face_normals[:, k][:, None, :]
            f_hat = interface_flux(self.gas, self.flux, u_q, uh_q, normal)
            r = entropy_flux_residual(self.gas, u_q, uh_q, normal, f_hat)
            rhs -= float(np.sum(self.face_w[:, k] * r))
        return lhs, rhs, abs(lhs - rhs)

    def l2_error(self, fields, exact_fn, component=0):
        """L2 norm of (component of u_h - exact) over the domain."""
        total = 0.0
        for s in range(self.layout.n_sub):
            ids = self.layout.scatter[s]
            w_q = np.einsum("qi,eis->eqs", self.phi, fields.w[:, ids])
            u_q = self.to_conservative(w_q)
            u_ex = exact_fn(self.quad_coords[:, s])
            diff = u_q[..., component] - u_ex[..., component]
            total += float(np.sum(self.vol_w[:, s] * diff**2))
        return math.sqrt(total)

    def max_wavespeed(self, fields):
        out = 0.0
        for s in range(self.layout.n_sub):
            ids = self.layout.scatter[s]
            w_q = np.einsum("qi,eis->eqs", self.phi, fields.w[:, ids])
            u_q = self.to_conservative(w_q)
            rho, vel, pressure = self.gas.primitive(u_q)
            c = np.sqrt(self.gas.gamma * pressure / rho)
            out = max(out, float((np.linalg.norm(vel, axis=-1) + c).max()))
        return out

    def jacobian(self, fields, stage=None, ptc_weight=0.0,
                 sparse_local_threshold=2048):
        """Linearize the residuals at the given state.

        Per-macro blocks of at least sparse_local_threshold rows are factored
        with a sparse LU instead of a dense one.
        """
        return LinearizedSystem(self, fields, stage, ptc_weight,
                                sparse_local_threshold)


def _jacobian_wrt_gradient(f, q):
    """Complex-step jacobian over the (state, direction) axes of q."""
    shape = q.shape
    flat = q.reshape(shape[:-2] + (-1,))
    jac = complex_step_jacobian(
        lambda qf: f(qf.reshape(qf.shape[:-1] + shape[-2:])), flat
    )
    return jac.reshape(jac.shape[:-1] + shape[-2:])


def _factor_local(mat, macro, sparse_threshold):
    """Factor one macro-local matrix, returning a solve callable."""
    if mat.shape[0] >= sparse_threshold:
        try:
            lu = splu(csc_matrix(mat))
        except RuntimeError as exc:
            raise SingularLocalMatrix(
                f"sparse factorization failed on macro {macro}: {exc}",
                macro=macro) from exc
        return lu.solve
    lu = lu_factor(mat, check_finite=False)
    diag = np.abs(np.diagonal(lu[0]))
    if not np.isfinite(lu[0]).all() or diag.min() == 0.0:
        raise SingularLocalMatrix(
            f"singular condensed block on macro {macro}", macro=macro)
    return lambda r: lu_solve(lu, r, check_finite=False)


def _factor_face_block(mat, face):
    """Cholesky when the block is symmetric positive definite, LU otherwise.

    Returns (solve callable, used_cholesky).
    """
    scale = max(1.0, float(np.abs(mat).max()))
    if np.abs(mat - mat.T).max() <= 1e-12 * scale:
        try:
            cho = cho_factor(mat, check_finite=False)
            return (lambda r: cho_solve(cho, r, check_finite=False)), True
        except LinAlgError:
            pass
    lu = lu_factor(mat, check_finite=False)
    diag = np.abs(np.diagonal(lu[0]))
    if not np.isfinite(lu[0]).all() or diag.min() == 0.0:
        raise SingularBlock(f"singular trace block on face {face}")
    return (lambda r: lu_solve(lu, r, check_finite=False)), False


class LinearizedSystem:
    """Jacobian of the residuals, organized for static condensation.

    The macro-local w block S = A_vv - A_vq M^-1 A_qv is assembled and
    LU-factored per macro.  Couplings to the trace and gradient unknowns stay
    as quadrature tensors and geometric operators applied matrix free.  The
    condensed trace operator is

        A_hat = D + G1 S^-1 G2
        D  = A_hh - A_hq M^-1 A_qh,   G1 = A_hv - A_hq M^-1 A_qv,
        G2 = A_vq M^-1 A_qh - A_vh,

    with h the trace block and M the (vector) mass matrix of the gradient
    equation.  With supg enabled the streamline term enters S with frozen
    transport coefficients, so the linearization is approximate there.
    """

    def __init__(self, disc, fields, stage, ptc_weight,
                 sparse_local_threshold=2048):
        self.disc = disc
        self.viscous = disc.viscosity is not None
        self.trace_shape = fields.trace.shape
        d = disc.d
        n_s = disc.n_s
        gas = disc.gas
        layout = disc.layout
        E = disc.mesh.n_macros
        nc = layout.n_unique
        weight = (stage.alpha if stage is not None else 0.0) + ptc_weight

        n_mat = nc * n_s
        s_big = np.zeros((E, nc, nc, n_s, n_s))

        # ---- volume contributions --------------------------------------
        self.avq_sub = []
        for s in range(layout.n_sub):
            ids = layout.scatter[s]
            w_q = np.einsum("qi,eis->eqs", disc.phi, fields.w[:, ids])
            wv = disc.vol_w[:, s]
            dphi = disc.dphi_phys[:, s]
            q_q = None
            if self.viscous:
                q_q = np.einsum("qi,eitb->eqtb", disc.phi, fields.q[:, ids])

            def transport(wc, q_fixed=q_q):
                u = disc.to_conservative(wc)
                flux = gas.flux(u)
                if self.viscous:
                    if disc.formulation == "entropy":
                        gv, gt = gas.velocity_temperature_gradients_entropy(
                            wc, q_fixed
                        )
                    else:
                        gv, gt = gas.velocity_temperature_gradients(wc, q_fixed)
                    vel = gas.primitive(u)[1]
                    flux = flux + gas.viscous_flux(disc.viscosity, vel, gv, gt)
                return flux

            fgw = complex_step_jacobian(transport, w_q)   # (E,nq,n_s,d,n_s)
            blk = -np.einsum("eq,eqia,eqsat,qj->eisjt",
                             wv, dphi, fgw, disc.phi, optimize=True)
            if weight != 0.0:
                if disc.formulation == "conservative":
                    eye = np.eye(n_s)
                    tw = np.broadcast_to(eye, w_q.shape + (n_s,))
                else:
                    tw = complex_step_jacobian(
                        lambda wc: disc.to_conservative(wc), w_q
                    )
                blk = blk + weight * np.einsum(
                    "eq,qi,eqst,qj->eisjt", wv, disc.phi, tw, disc.phi,
                    optimize=True,
                )
            if disc.supg:
                blk = blk + self._supg_block(s, fields.w[:, ids], w_q, stage,
                                             ptc_weight)
            ix = ids[:, None]
            jx = ids[None, :]
            s_big[:, ix, jx] += blk.transpose(0, 1, 3, 2, 4)

            if self.viscous:
                def diffusive(qc, w_fixed=w_q):
                    if disc.formulation == "entropy":
                        gv, gt = gas.velocity_temperature_gradients_entropy(
                            w_fixed, qc
                        )
                    else:
                        gv, gt = gas.velocity_temperature_gradients(w_fixed, qc)
                    u = disc.to_conservative(w_fixed)
                    vel = gas.primitive(u)[1]
                    return gas.viscous_flux(disc.viscosity, vel, gv, gt)

                gq = _jacobian_wrt_gradient(diffusive, q_q)
                avq = -np.einsum("eq,eqia,eqsatb,ql->eisltb",
                                 wv, dphi, gq, disc.phi, optimize=True)
                self.avq_sub.append(avq)
                p_rows = disc.mass_inv_stiff[:, :, ids, :]   # (E,d,nb,nc)
                corr = np.einsum("eisltb,eblj->eisjt", avq, p_rows,
                                 optimize=True)
                s_big[:, ids] -= corr.transpose(0, 1, 3, 2, 4)

        # ---- face contributions ----------------------------------------
        self.hw = []
        self.hhat = []
        self.ghost_hhat = []
        self.trace_ptc = []
        self.avq_face = []
        self.avhatq = []
        for k in range(disc.n_st):
            rows = disc.face_rows[k]
            w_q = np.einsum("qi,eis->eqs", disc.phi_face[k], fields.w[:, rows])
            tr = disc._gather_trace(fields.trace, k)
            wh_q = np.einsum("qi,eis->eqs", disc.fphi, tr)
            uh_q = disc.to_conservative(wh_q)
            normal = disc.face_normals[:, k][:, None, :]
            q_q = None
            if self.viscous:
                q_q = np.einsum("qi,eitb->eqtb", disc.phi_face[k],
                                fields.q[:, rows])

            def face_total(wc, whc, qc):
                u = disc.to_conservative(wc)
                uh = disc.to_conservative(whc)
                total = interface_flux(gas, disc.flux, u, uh, normal)
                if self.viscous:
                    g_n = disc._viscous_face_flux(wc, qc, u, normal)
                    total = total + viscous_numerical_flux(
                        gas, disc.viscosity, g_n, wc, whc
                    )
                return total

            hw = complex_step_jacobian(lambda wc: face_total(wc, wh_q, q_q),
                                       w_q)
            hhat = complex_step_jacobian(
                lambda whc: face_total(w_q, whc, q_q), wh_q
            )
            self.hw.append(hw)
            self.hhat.append(hhat)

            # Pseudo-transient damping of the trace continuity equation.
            # The entropy-consistent dissipation vanishes at coincident
            # states, leaving near-null trace modes in the condensed
            # operator; without this term the first Newton update of a
            # freshly projected field can be arbitrarily large.  Scales
            # with 1/tau like the temporal diagonal, so it disappears as
            # the stage solve converges.  Sign: the trace rows sum outward
            # fluxes, whose derivative in the trace state is -1/2 of the
            # dissipation coefficient per side, so the damping is negative.
            if ptc_weight != 0.0:
                if disc.formulation == "conservative":
                    tw_hat = np.broadcast_to(
                        np.eye(n_s), wh_q.shape + (n_s,)
                    )
                else:
                    tw_hat = complex_step_jacobian(
                        lambda whc: disc.to_conservative(whc), wh_q
                    )
                self.trace_ptc.append(-ptc_weight * tw_hat)
            else:
                self.trace_ptc.append(None)

            blk = np.einsum("eq,qi,eqst,qj->eisjt",
                            disc.face_w[:, k], disc.phi_face[k], hw,
                            disc.phi_face[k], optimize=True)
            rx = rows[:, None]
            cx = rows[None, :]
            s_big[:, rx, cx] += blk.transpose(0, 1, 3, 2, 4)

            if self.viscous:
                def face_diffusive(qc):
                    u = disc.to_conservative(w_q)
                    g_n = disc._viscous_face_flux(w_q, qc, u, normal)
                    return viscous_numerical_flux(gas, disc.viscosity, g_n,
                                                  w_q, wh_q)

                gqf = _jacobian_wrt_gradient(face_diffusive, q_q)
                avqf = np.einsum("eq,qi,eqstb,ql->eisltb",
                                 disc.face_w[:, k], disc.phi_face[k], gqf,
                                 disc.phi_face[k], optimize=True)
                avh = np.einsum("eq,qi,eqstb,ql->eisltb",
                                disc.face_w[:, k], disc.fphi, gqf,
                                disc.phi_face[k], optimize=True)
                self.avq_face.append(avqf)
                self.avhatq.append(avh)
                p_rows = disc.mass_inv_stiff[:, :, rows, :]
                corr = np.einsum("eisltb,eblj->eisjt", avqf, p_rows,
                                 optimize=True)
                s_big[:, rows] -= corr.transpose(0, 1, 3, 2, 4)

            if disc.boundary is not None and disc.boundary_st[:, k].any():
                u_inf = np.broadcast_to(disc.boundary.state, uh_q.shape)
                w_inf = disc.from_conservative(
                    np.asarray(disc.boundary.state, float)
                )

                def ghost_total(whc):
                    uh = disc.to_conservative(whc)
                    total = interface_flux(gas, disc.flux, u_inf, uh, -normal)
                    if self.viscous:
                        total = total + viscous_numerical_flux(
                            gas, disc.viscosity, np.zeros_like(total),
                            np.broadcast_to(w_inf, whc.shape), whc,
                        )
                    return total

                gh = complex_step_jacobian(ghost_total, wh_q)
                gh[~disc.boundary_st[:, k]] = 0.0
                self.ghost_hhat.append(gh)
            else:
                self.ghost_hhat.append(None)

        # ---- factorizations ---------------------------------------------
        s_mat = np.ascontiguousarray(
            s_big.transpose(0, 1, 3, 2, 4).reshape(E, n_mat, n_mat)
        )
        del s_big
        self.schur_solve = [
            _factor_local(s_mat[e], e, sparse_local_threshold)
            for e in range(E)
        ]
        del s_mat
        self._build_preconditioner()

    def _supg_block(self, s, u_nodes, u_q, stage, ptc_weight):
        disc = self.disc
        a_mats, tau = disc._supg_transport(s, u_q, stage)
        dphi = disc.dphi_phys[:, s]
        test = np.einsum("eqast,eqia->eqist", a_mats, dphi)
        alpha = (stage.alpha if stage is not None else 0.0) + ptc_weight
        n_s = disc.n_s
        dstrong = np.einsum("eqamt,eqja->eqmjt", a_mats, dphi)
        if alpha != 0.0:
            eye = np.eye(n_s)
            dstrong = dstrong + alpha * np.einsum(
                "qj,mt->qjmt", disc.phi, eye
            ).transpose(0, 2, 1, 3)[None]
        return np.einsum("eq,eqism,eq,eqmjt->eisjt",
                         disc.vol_w[:, s], test, tau, dstrong, optimize=True)

    def _build_preconditioner(self):
        disc = self.disc
        n_s = disc.n_s
        nt = self.trace_shape[1]
        blocks = np.zeros((self.trace_shape[0], nt, n_s, nt, n_s))
        for k in range(disc.n_st):
            hh = self.hhat[k]
            if self.ghost_hhat[k] is not None:
                hh = hh + self.ghost_hhat[k]
            if self.trace_ptc[k] is not None:
                hh = hh + self.trace_ptc[k]
            vals = np.einsum("eq,qi,eqst,qj->eisjt",
                             disc.face_w[:, k], disc.fphi, hh, disc.fphi,
                             optimize=True)
            fid = disc.face_id_st[:, k]
            tidx = disc.trace_idx[:, k]
            np.add.at(
                blocks,
                (fid[:, None, None], tidx[:, :, None], np.s_[:],
                 tidx[:, None, :]),
                vals.transpose(0, 1, 3, 2, 4),
            )
        n = nt * n_s
        self.precond_solve = []
        n_unsym = 0
        for f in range(self.trace_shape[0]):
            mat = blocks[f].reshape(n, n)
            solve, sym = _factor_face_block(mat, f)
            n_unsym += not sym
            self.precond_solve.append(solve)
        if n_unsym:
            log.debug("%d of %d trace face blocks not SPD, using LU",
                      n_unsym, self.trace_shape[0])

    # ---- block actions ---------------------------------------------------

    def _solve_schur(self, r):
        E, nc, n_s = r.shape
        out = np.empty_like(r)
        for e in range(E):
            out[e] = self.schur_solve[e](r[e].reshape(-1)).reshape(nc, n_s)
        return out

    def _solve_mass(self, y):
        disc = self.disc
        out = np.empty_like(y)
        nc = y.shape[1]
        for e in range(y.shape[0]):
            out[e] = cho_solve(disc.mass_factor[e],
                               y[e].reshape(nc, -1),
                               check_finite=False).reshape(y[e].shape)
        return out

    def _apply_qv(self, x):
        """Gradient-equation coupling to w: out[e,j,t,b] = K_b x."""
        return np.einsum("ebji,eit->ejtb", self.disc.stiff, x)

    def _apply_qvhat(self, xh):
        disc = self.disc
        out = np.zeros(xh.shape[:0] + (disc.mesh.n_macros,
                                       disc.layout.n_unique, disc.n_s,
                                       disc.d))
        for k in range(disc.n_st):
            tile = xh[disc.face_id_st[:, k][:, None], disc.trace_idx[:, k]]
            contrib = np.einsum("eijb,ejt->eitb", disc.face_edge_op[:, k],
                                tile)
            np.add.at(out, (np.s_[:], disc.face_rows[k]), -contrib)
        return out

    def _apply_vq(self, y):
        disc = self.disc
        out = np.zeros((disc.mesh.n_macros, disc.layout.n_unique, disc.n_s))
        for s in range(disc.layout.n_sub):
            ids = disc.layout.scatter[s]
            out[:, ids] += np.einsum("eisltb,eltb->eis",
                                     self.avq_sub[s], y[:, ids])
        for k in range(disc.n_st):
            rows = disc.face_rows[k]
            out[:, rows] += np.einsum("eisltb,eltb->eis",
                                      self.avq_face[k], y[:, rows])
        return out

    def _apply_vhatq(self, y):
        disc = self.disc
        out = np.zeros(self.trace_shape)
        for k in range(disc.n_st):
            rows = disc.face_rows[k]
            vals = np.einsum("eisltb,eltb->eis", self.avhatq[k], y[:, rows])
            np.add.at(out, (disc.face_id_st[:, k][:, None],
                            disc.trace_idx[:, k]), vals)
        return out

    def _apply_vvhat(self, xh):
        disc = self.disc
        out = np.zeros((disc.mesh.n_macros, disc.layout.n_unique, disc.n_s))
        for k in range(disc.n_st):
            tile = xh[disc.face_id_st[:, k][:, None], disc.trace_idx[:, k]]
            xq = np.einsum("qi,eis->eqs", disc.fphi, tile)
            tmp = np.einsum("eqst,eqt->eqs", self.hhat[k], xq)
            out[:, disc.face_rows[k]] += np.einsum(
                "eq,qi,eqs->eis", disc.face_w[:, k], disc.phi_face[k], tmp
            )
        return out

    def _apply_vhatv(self, x):
        disc = self.disc
        out = np.zeros(self.trace_shape)
        for k in range(disc.n_st):
            xq = np.einsum("qi,eis->eqs", disc.phi_face[k],
                           x[:, disc.face_rows[k]])
            tmp = np.einsum("eqst,eqt->eqs", self.hw[k], xq)
            vals = np.einsum("eq,qi,eqs->eis", disc.face_w[:, k], disc.fphi,
                             tmp)
            np.add.at(out, (disc.face_id_st[:, k][:, None],
                            disc.trace_idx[:, k]), vals)
        return out

    def _apply_vhatvhat(self, xh):
        disc = self.disc
        out = np.zeros(self.trace_shape)
        for k in range(disc.n_st):
            tile = xh[disc.face_id_st[:, k][:, None], disc.trace_idx[:, k]]
            xq = np.einsum("qi,eis->eqs", disc.fphi, tile)
            hh = self.hhat[k]
            if self.ghost_hhat[k] is not None:
                hh = hh + self.ghost_hhat[k]
            if self.trace_ptc[k] is not None:
                hh = hh + self.trace_ptc[k]
            tmp = np.einsum("eqst,eqt->eqs", hh, xq)
            vals = np.einsum("eq,qi,eqs->eis", disc.face_w[:, k], disc.fphi,
                             tmp)
            np.add.at(out, (disc.face_id_st[:, k][:, None],
                            disc.trace_idx[:, k]), vals)
        return out

    # ---- condensed interface ----------------------------------------------

    def matvec(self, xh):
        """Condensed trace operator A_hat applied to xh (trace shaped)."""
        out = self._apply_vhatvhat(xh)
        g2 = -self._apply_vvhat(xh)
        if self.viscous:
            yq = self._solve_mass(self._apply_qvhat(xh))
            g2 += self._apply_vq(yq)
            out -= self._apply_vhatq(yq)
        z = self._solve_schur(g2)
        out += self._apply_vhatv(z)
        if self.viscous:
            out -= self._apply_vhatq(self._solve_mass(self._apply_qv(z)))
        return out

    def condensed_rhs(self, res):
        """Right side of the trace system for the Newton update."""
        r_w = -res.r_w
        r_hat = -res.r_trace
        if self.viscous:
            mq = self._solve_mass(res.r_q)
            r_w = r_w + self._apply_vq(mq)
            r_hat = r_hat + self._apply_vhatq(mq)
        z = self._solve_schur(r_w)
        b = r_hat - self._apply_vhatv(z)
        if self.viscous:
            b += self._apply_vhatq(self._solve_mass(self._apply_qv(z)))
        return b

    def recover(self, res, d_trace):
        """Local updates (d_w, d_q) once the trace update is known."""
        r_w = -res.r_w
        if self.viscous:
            r_w = r_w + self._apply_vq(self._solve_mass(res.r_q))
        g2 = -self._apply_vvhat(d_trace)
        if self.viscous:
            g2 += self._apply_vq(self._solve_mass(self._apply_qvhat(d_trace)))
        d_w = self._solve_schur(r_w + g2)
        d_q = None
        if self.viscous:
            d_q = -self._solve_mass(
                res.r_q + self._apply_qv(d_w) + self._apply_qvhat(d_trace)
            )
        return d_w, d_q

    def apply_preconditioner(self, r):
        """Face-block solve on a trace-shaped array."""
        out = np.empty_like(r)
        for f in range(r.shape[0]):
            out[f] = self.precond_solve[f](r[f].reshape(-1)).reshape(r[f].shape)
        return out
