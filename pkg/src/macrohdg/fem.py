"""Reference-element machinery on simplices.

Orthonormal modal bases (Jacobi / collapsed-coordinate construction), warped
nodal sets, Gauss-Jacobi quadrature on the unit simplex, affine geometric
maps, and the C0 node-sharing layout of a uniformly subdivided macro-simplex.

The reference simplex in dimension d is the unit right simplex
{x : x_i >= 0, sum x_i <= 1} with vertices (0, e_1, .., e_d); its volume is
1/d!.  The reference macro-simplex is the path ("Kuhn") simplex
{1 >= x_1 >= x_2 >= .. >= x_d >= 0}, which tiles under uniform subdivision
into m^d affine copies of itself.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import roots_jacobi

from .errors import DegenerateElement, InvalidConfig

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Jacobi polynomials, orthonormal on [-1, 1] w.r.t. (1-x)^a (1+x)^b
# ---------------------------------------------------------------------------

def jacobi_poly(n, alpha, beta, x):
    """Orthonormal Jacobi polynomial of degree n evaluated at x (array ok)."""
    x = np.asarray(x, dtype=float)
    gamma0 = (
        2.0 ** (alpha + beta + 1)
        / (alpha + beta + 1)
        * math.gamma(alpha + 1)
        * math.gamma(beta + 1)
        / math.gamma(alpha + beta + 1)
    )
    p_prev = np.full_like(x, 1.0 / math.sqrt(gamma0))
    if n == 0:
        return p_prev
    gamma1 = (alpha + 1) * (beta + 1) / (alpha + beta + 3) * gamma0
    p_cur = ((alpha + beta + 2) * x / 2 + (alpha - beta) / 2) / math.sqrt(gamma1)
    if n == 1:
        return p_cur
    a_old = 2.0 / (2 + alpha + beta) * math.sqrt(
        (alpha + 1) * (beta + 1) / (alpha + beta + 3)
    )
    for i in range(1, n):
        h1 = 2 * i + alpha + beta
        a_new = 2.0 / (h1 + 2) * math.sqrt(
            (i + 1)
            * (i + 1 + alpha + beta)
            * (i + 1 + alpha)
            * (i + 1 + beta)
            / ((h1 + 1) * (h1 + 3))
        )
        b_new = -(alpha ** 2 - beta ** 2) / (h1 * (h1 + 2))
        p_next = (-a_old * p_prev + (x - b_new) * p_cur) / a_new
        p_prev, p_cur = p_cur, p_next
        a_old = a_new
    return p_cur


def jacobi_deriv(n, alpha, beta, x):
    """Derivative of the orthonormal Jacobi polynomial of degree n."""
    x = np.asarray(x, dtype=float)
    if n == 0:
        return np.zeros_like(x)
    return math.sqrt(n * (n + alpha + beta + 1)) * jacobi_poly(
        n - 1, alpha + 1, beta + 1, x
    )


# ---------------------------------------------------------------------------
# Modal (orthonormal) bases on the unit simplex
# ---------------------------------------------------------------------------

def mode_count(p, d):
    return math.comb(p + d, d)


def _mode_tuples(p, d):
    if d == 1:
        return [(i,) for i in range(p + 1)]
    if d == 2:
        return [(i, j) for i in range(p + 1) for j in range(p + 1 - i)]
    return [
        (i, j, k)
        for i in range(p + 1)
        for j in range(p + 1 - i)
        for k in range(p + 1 - i - j)
    ]


def _collapsed_2d(r, s):
    one_s = 1.0 - s
    ok = np.abs(one_s) > 1e-12
    a = np.where(ok, 2 * (1 + r) / np.where(ok, one_s, 1.0) - 1, -1.0)
    return a, s.copy()


def _collapsed_3d(r, s, t):
    st = s + t
    ok_a = np.abs(st) > 1e-12
    a = np.where(ok_a, -2 * (1 + r) / np.where(ok_a, st, 1.0) - 1, -1.0)
    one_t = 1.0 - t
    ok_b = np.abs(one_t) > 1e-12
    b = np.where(ok_b, 2 * (1 + s) / np.where(ok_b, one_t, 1.0) - 1, -1.0)
    return a, b, t.copy()


def simplex_modal(p, d, x):
    """Orthonormal modal basis values on the unit simplex: (npts, n_modes)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    modes = _mode_tuples(p, d)
    out = np.empty((x.shape[0], len(modes)))
    if d == 1:
        r = 2 * x[:, 0] - 1
        for col, (i,) in enumerate(modes):
            out[:, col] = math.sqrt(2.0) * jacobi_poly(i, 0, 0, r)
        return out
    if d == 2:
        r, s = 2 * x[:, 0] - 1, 2 * x[:, 1] - 1
        a, b = _collapsed_2d(r, s)
        for col, (i, j) in enumerate(modes):
            fa = jacobi_poly(i, 0, 0, a)
            gb = jacobi_poly(j, 2 * i + 1, 0, b)
            out[:, col] = 2 * math.sqrt(2.0) * fa * gb * (1 - b) ** i
        return out
    r, s, t = 2 * x[:, 0] - 1, 2 * x[:, 1] - 1, 2 * x[:, 2] - 1
    a, b, c = _collapsed_3d(r, s, t)
    for col, (i, j, k) in enumerate(modes):
        fa = jacobi_poly(i, 0, 0, a)
        gb = jacobi_poly(j, 2 * i + 1, 0, b)
        hc = jacobi_poly(k, 2 * (i + j) + 2, 0, c)
        out[:, col] = 8.0 * fa * gb * (1 - b) ** i * hc * (1 - c) ** (i + j)
    return out


def simplex_modal_grad(p, d, x):
    """Gradients of the modal basis: (npts, n_modes, d) on the unit simplex."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    modes = _mode_tuples(p, d)
    out = np.empty((x.shape[0], len(modes), d))
    if d == 1:
        r = 2 * x[:, 0] - 1
        for col, (i,) in enumerate(modes):
            out[:, col, 0] = 2 * math.sqrt(2.0) * jacobi_deriv(i, 0, 0, r)
        return out
    if d == 2:
        r, s = 2 * x[:, 0] - 1, 2 * x[:, 1] - 1
        a, b = _collapsed_2d(r, s)
        for col, (i, j) in enumerate(modes):
            fa = jacobi_poly(i, 0, 0, a)
            dfa = jacobi_deriv(i, 0, 0, a)
            gb = jacobi_poly(j, 2 * i + 1, 0, b)
            dgb = jacobi_deriv(j, 2 * i + 1, 0, b)
            dr = dfa * gb
            ds = dfa * gb * 0.5 * (1 + a)
            if i > 0:
                pref = (0.5 * (1 - b)) ** (i - 1)
                dr = dr * pref
                ds = ds * pref
            tmp = dgb * (0.5 * (1 - b)) ** i
            if i > 0:
                tmp = tmp - 0.5 * i * gb * (0.5 * (1 - b)) ** (i - 1)
            ds = ds + fa * tmp
            # 2^(i+1/2) restores the orthonormal scale of the half-power
            # forms; one factor 2 maps the bi-unit triangle onto the unit
            # simplex, the other is the coordinate chain rule
            full = 4.0 * 2.0 ** (i + 0.5)
            out[:, col, 0] = full * dr
            out[:, col, 1] = full * ds
        return out
    r, s, t = 2 * x[:, 0] - 1, 2 * x[:, 1] - 1, 2 * x[:, 2] - 1
    a, b, c = _collapsed_3d(r, s, t)
    for col, (i, j, k) in enumerate(modes):
        fa = jacobi_poly(i, 0, 0, a)
        dfa = jacobi_deriv(i, 0, 0, a)
        gb = jacobi_poly(j, 2 * i + 1, 0, b)
        dgb = jacobi_deriv(j, 2 * i + 1, 0, b)
        hc = jacobi_poly(k, 2 * (i + j) + 2, 0, c)
        dhc = jacobi_deriv(k, 2 * (i + j) + 2, 0, c)

        v_r = dfa * gb * hc
        if i > 0:
            v_r = v_r * (0.5 * (1 - b)) ** (i - 1)
        if i + j > 0:
            v_r = v_r * (0.5 * (1 - c)) ** (i + j - 1)

        tmp = dgb * (0.5 * (1 - b)) ** i
        if i > 0:
            tmp = tmp - 0.5 * i * gb * (0.5 * (1 - b)) ** (i - 1)
        if i + j > 0:
            tmp = tmp * (0.5 * (1 - c)) ** (i + j - 1)
        tmp = fa * tmp * hc
        v_s = 0.5 * (1 + a) * v_r + tmp

        tmp2 = dhc * (0.5 * (1 - c)) ** (i + j)
        if i + j > 0:
            tmp2 = tmp2 - 0.5 * (i + j) * hc * (0.5 * (1 - c)) ** (i + j - 1)
        tmp2 = fa * gb * tmp2 * (0.5 * (1 - b)) ** i
        v_t = 0.5 * (1 + a) * v_r + 0.5 * (1 + b) * tmp + tmp2

        full = 4 * math.sqrt(2.0) * 2.0 ** (2 * i + j + 1.5)
        out[:, col, 0] = full * v_r
        out[:, col, 1] = full * v_s
        out[:, col, 2] = full * v_t
    return out


# ---------------------------------------------------------------------------
# Quadrature on the unit simplex (collapsed Gauss-Jacobi)
# ---------------------------------------------------------------------------

def quadrature(required_degree, d, kind="volume"):
    """Points and weights integrating polynomials of `required_degree` exactly.

    kind='volume' returns a rule on the unit d-simplex; kind='face' returns a
    rule on the unit (d-1)-simplex (the reference facet).  Weights are
    positive and sum to the reference measure 1/dim!.
    """
    if required_degree < 0:
        raise InvalidConfig(f"required_degree must be >= 0, got {required_degree}")
    if kind == "face":
        return quadrature(required_degree, d - 1, kind="volume")
    if kind != "volume":
        raise InvalidConfig(f"unknown quadrature kind {kind!r}")
    if d not in (1, 2, 3):
        raise InvalidConfig(f"no simplex rule for dimension {d}")
    n = max(1, math.ceil((required_degree + 1) / 2))
    if d == 1:
        xg, wg = roots_jacobi(n, 0.0, 0.0)
        return 0.5 * (xg[:, None] + 1), 0.5 * wg
    xa, wa = roots_jacobi(n, 0.0, 0.0)
    xb, wb = roots_jacobi(n, 1.0, 0.0)
    if d == 2:
        a, b = np.meshgrid(xa, xb, indexing="ij")
        r = (1 + a) * (1 - b) / 2 - 1
        s = b
        w = np.outer(wa, wb) / 2.0
        pts = np.column_stack([(r.ravel() + 1) / 2, (s.ravel() + 1) / 2])
        return pts, w.ravel() / 4.0
    xc, wc = roots_jacobi(n, 2.0, 0.0)
    a, b, c = np.meshgrid(xa, xb, xc, indexing="ij")
    t = c
    s = (1 + b) * (1 - t) / 2 - 1
    r = (1 + a) * (1 - b) * (1 - c) / 4 - 1
    w = wa[:, None, None] * wb[None, :, None] * wc[None, None, :] / 8.0
    pts = np.column_stack(
        [(r.ravel() + 1) / 2, (s.ravel() + 1) / 2, (t.ravel() + 1) / 2]
    )
    return pts, w.ravel() / 8.0


# ---------------------------------------------------------------------------
# Warped nodal sets (warp-and-blend; equispaced for p <= 2)
# ---------------------------------------------------------------------------

_ALPHA_2D = [0.0, 0.0, 1.4152, 0.1001, 0.2751, 0.9800, 1.0999,
             1.2832, 1.3648, 1.4773, 1.4959, 1.5743, 1.5770, 1.6223, 1.6258]
_ALPHA_3D = [0.0, 0.0, 0.0, 0.1002, 1.1332, 1.5608, 1.3413, 1.2577,
             1.1603, 1.10153, 0.6080, 0.4523, 0.8856, 0.8717, 0.9655]


def gauss_lobatto(p):
    """p+1 Gauss-Lobatto points on [-1, 1], ascending."""
    if p == 0:
        return np.array([0.0])
    if p == 1:
        return np.array([-1.0, 1.0])
    interior, _ = roots_jacobi(p - 1, 1.0, 1.0)
    return np.concatenate([[-1.0], np.sort(interior), [1.0]])


def _warp_factor(p, rout):
    """1D displacement from equispaced towards Gauss-Lobatto spacing."""
    lgl = gauss_lobatto(p)
    req = np.linspace(-1.0, 1.0, p + 1)
    veq = np.column_stack([jacobi_poly(j, 0, 0, req) for j in range(p + 1)])
    pmat = np.vstack([jacobi_poly(j, 0, 0, rout) for j in range(p + 1)])
    lmat = np.linalg.solve(veq.T, pmat)
    warp = lmat.T @ (lgl - req)
    zerof = (np.abs(rout) < 1.0 - 1e-10).astype(float)
    sf = 1.0 - (zerof * rout) ** 2
    return warp / sf + warp * (zerof - 1.0)


def _eval_warp_1d(p, xout):
    """Edge warp divided by the edge bubble, in Lagrange form (no guards).

    The two endpoint factors of each interior Lagrange polynomial are
    replaced by constants, which is exactly a division by (1 - x^2); face
    blending supplies that bubble back.
    """
    gauss_x = -gauss_lobatto(p)
    xeq = np.array([-1 + 2 * (p - i) / p for i in range(p + 1)])
    warp = np.zeros_like(np.asarray(xout, dtype=float))
    for i in range(1, p):
        dval = np.full_like(warp, gauss_x[i] - xeq[i])
        for j in range(1, p):
            if j != i:
                dval = dval * (xout - xeq[j]) / (xeq[i] - xeq[j])
        dval = -dval / (xeq[i] - xeq[0])
        dval = dval / (xeq[i] - xeq[p])
        warp += dval
    return warp


def _equispaced_barycentric(p, nverts):
    combos = [
        c for c in itertools.product(range(p + 1), repeat=nverts) if sum(c) == p
    ]
    lam = np.array(sorted(combos, reverse=True), dtype=float) / p
    return lam


def _nodes_interval(p):
    return (0.5 * (gauss_lobatto(p) + 1.0))[:, None]


def _nodes_triangle(p):
    alpha = _ALPHA_2D[p - 1] if p - 1 < len(_ALPHA_2D) else 5.0 / 3.0
    lam = _equispaced_barycentric(p, 3)
    v = np.array([[-1.0, -1 / math.sqrt(3.0)],
                  [1.0, -1 / math.sqrt(3.0)],
                  [0.0, 2 / math.sqrt(3.0)]])
    xy = lam @ v
    # warp along each edge (a -> b), blended by the opposite barycentric
    for a_i, b_i, opp in [(0, 1, 2), (1, 2, 0), (2, 0, 1)]:
        wf = _warp_factor(p, lam[:, b_i] - lam[:, a_i])
        w = 4 * lam[:, a_i] * lam[:, b_i] * wf * (1 + (alpha * lam[:, opp]) ** 2)
        xy = xy + w[:, None] * (v[b_i] - v[a_i]) / 2
    ext = np.column_stack([xy, np.ones(len(xy))])
    basis = np.column_stack([v, np.ones(3)])
    bary = np.linalg.solve(basis.T, ext.T).T
    return bary[:, 1:3].copy()  # unit-simplex coordinates


def _eval_shift_face(p, alpha, l1, l2, l3):
    """Tangential warp of a triangular face, in that face's 2D frame."""
    blend = [l2 * l3, l1 * l3, l1 * l2]
    warpf = [4 * _eval_warp_1d(p, l3 - l2), 4 * _eval_warp_1d(p, l1 - l3),
             4 * _eval_warp_1d(p, l2 - l1)]
    lref = [l1, l2, l3]
    w = [blend[k] * warpf[k] * (1 + (alpha * lref[k]) ** 2) for k in range(3)]
    dt1 = w[0] + math.cos(2 * math.pi / 3) * w[1] + math.cos(4 * math.pi / 3) * w[2]
    dt2 = math.sin(2 * math.pi / 3) * w[1] + math.sin(4 * math.pi / 3) * w[2]
    return dt1, dt2


def _nodes_tet(p):
    alpha = _ALPHA_3D[p - 1] if p - 1 < len(_ALPHA_3D) else 1.0
    tol = 1e-10
    lam = _equispaced_barycentric(p, 4)
    v = np.array([
        [-1.0, -1 / math.sqrt(3.0), -1 / math.sqrt(6.0)],
        [1.0, -1 / math.sqrt(3.0), -1 / math.sqrt(6.0)],
        [0.0, 2 / math.sqrt(3.0), -1 / math.sqrt(6.0)],
        [0.0, 0.0, 3 / math.sqrt(6.0)],
    ])
    xyz = lam @ v
    t1 = np.array([v[1] - v[0], v[1] - v[0], v[2] - v[1], v[2] - v[0]])
    t2 = np.array([v[2] - 0.5 * (v[0] + v[1]), v[3] - 0.5 * (v[0] + v[1]),
                   v[3] - 0.5 * (v[1] + v[2]), v[3] - 0.5 * (v[0] + v[2])])
    t1 = t1 / np.linalg.norm(t1, axis=1)[:, None]
    t2 = t2 / np.linalg.norm(t2, axis=1)[:, None]
    # per face: barycentric columns (off-face; top, left, right in the face
    # frame), chosen so the face frame matches t1/t2 above
    face_lams = [(3, 2, 0, 1), (2, 3, 0, 1), (0, 3, 1, 2), (1, 3, 0, 2)]
    shift = np.zeros_like(xyz)
    for f, (ia, ib, ic, idd) in enumerate(face_lams):
        la, lb, lc, ld = lam[:, ia], lam[:, ib], lam[:, ic], lam[:, idd]
        w1, w2 = _eval_shift_face(p, alpha, lb, lc, ld)
        blend = lb * lc * ld
        denom = (lb + 0.5 * la) * (lc + 0.5 * la) * (ld + 0.5 * la)
        ok = denom > tol
        blend = np.where(
            ok, (1 + (alpha * la) ** 2) * blend / np.where(ok, denom, 1.0), 0.0
        )
        shift += (blend * w1)[:, None] * t1[f] + (blend * w2)[:, None] * t2[f]
        on_edge = (la < tol) & (
            (lb > tol).astype(int) + (lc > tol).astype(int)
            + (ld > tol).astype(int) < 3
        )
        if np.any(on_edge):
            shift[on_edge] = (
                w1[on_edge, None] * t1[f] + w2[on_edge, None] * t2[f]
            )
    xyz = xyz + shift
    ext = np.column_stack([xyz, np.ones(len(xyz))])
    basis = np.column_stack([v, np.ones(4)])
    bary = np.linalg.solve(basis.T, ext.T).T
    return bary[:, 1:4].copy()


def simplex_nodes(p, d):
    """Interpolation nodes on the unit d-simplex (warped for p >= 3)."""
    if p < 1:
        raise InvalidConfig(f"degree must be >= 1, got {p}")
    if d == 1:
        return _nodes_interval(p)
    if d == 2:
        return _nodes_triangle(p)
    if d == 3:
        return _nodes_tet(p)
    raise InvalidConfig(f"unsupported dimension {d}")


# ---------------------------------------------------------------------------
# Reference basis with quadrature tables
# ---------------------------------------------------------------------------

def reference_face_vertices(d):
    """Vertex index tuples of the unit simplex faces (face k opposite vertex k)."""
    return [tuple(i for i in range(d + 1) if i != k) for k in range(d + 1)]


def unit_simplex_vertices(d):
    verts = np.zeros((d + 1, d))
    for k in range(d):
        verts[k + 1, k] = 1.0
    return verts


def face_embedding(d, k):
    """Affine embedding of the reference facet into face k: x = v0 + span @ xhat."""
    verts = unit_simplex_vertices(d)
    fv = reference_face_vertices(d)[k]
    v0 = verts[fv[0]]
    span = (verts[list(fv[1:])] - v0).T
    return v0, span


class ReferenceBasis:
    """Nodal basis of degree p on the unit d-simplex with quadrature tables.

    Attributes of interest: nodes (N, d), phi (nq, N), dphi (nq, N, d),
    quad_pts / quad_wts, cond (Vandermonde condition number), facet (the
    (d-1)-dimensional ReferenceBasis, None for d = 1), face_nodes (per face,
    indices of volume nodes lying on that face).
    """

    def __init__(self, p, d, quad_degree=None):
        if d not in (1, 2, 3):
            raise InvalidConfig(f"dimension must be 1, 2 or 3, got {d}")
        if not 1 <= p <= 10:
            raise InvalidConfig(f"degree must be in [1, 10], got {p}")
        self.p = p
        self.d = d
        self.nodes = simplex_nodes(p, d)
        self.n_nodes = len(self.nodes)
        self.vandermonde = simplex_modal(p, d, self.nodes)
        self.cond = np.linalg.cond(self.vandermonde)
        log.debug("reference basis p=%d d=%d cond(V)=%.3g", p, d, self.cond)
        self.v_inv = np.linalg.inv(self.vandermonde)
        if quad_degree is None:
            quad_degree = 2 * p + 1
        self.quad_degree = quad_degree
        self.quad_pts, self.quad_wts = quadrature(quad_degree, d)
        self.phi = self.eval_at(self.quad_pts)
        self.dphi = self.grad_at(self.quad_pts)
        self.facet = ReferenceBasis(p, d - 1, quad_degree) if d > 1 else None
        self.face_nodes = self._face_node_indices()

    def eval_at(self, points):
        """Nodal basis values at arbitrary points: (npts, n_nodes)."""
        return simplex_modal(self.p, self.d, points) @ self.v_inv

    def grad_at(self, points):
        """Nodal basis gradients at arbitrary points: (npts, n_nodes, d)."""
        dmodal = simplex_modal_grad(self.p, self.d, points)
        return np.einsum("qmk,mn->qnk", dmodal, self.v_inv)

    def _face_node_indices(self):
        x = self.nodes
        faces = []
        for k in range(self.d + 1):
            if k == 0:
                on = np.abs(x.sum(axis=1) - 1) < 1e-10
            else:
                on = np.abs(x[:, k - 1]) < 1e-10
            faces.append(np.nonzero(on)[0])
        return faces


# ---------------------------------------------------------------------------
# Affine geometric map of a physical simplex
# ---------------------------------------------------------------------------

@dataclass
class GeometricMap:
    jacobian: np.ndarray        # (d, d), columns v_k - v_0
    det: float
    inverse_transpose: np.ndarray
    normals: np.ndarray         # (d+1, d) outward unit normals
    areas: np.ndarray           # (d+1,) face measures
    vertices: np.ndarray

    @property
    def volume(self):
        return self.det / math.factorial(self.jacobian.shape[0])


def geometric_map(vertices):
    """Affine map data for a positively oriented simplex given its vertices."""
    vertices = np.asarray(vertices, dtype=float)
    d = vertices.shape[1]
    jac = (vertices[1:] - vertices[0]).T
    det = float(np.linalg.det(jac))
    if det <= 0.0:
        raise DegenerateElement(f"non-positive orientation, det={det:.3e}")
    inv_t = np.linalg.inv(jac).T
    centroid = vertices.mean(axis=0)
    normals = np.empty((d + 1, d))
    areas = np.empty(d + 1)
    for k, fverts in enumerate(reference_face_vertices(d)):
        pts = vertices[list(fverts)]
        if d == 2:
            tang = pts[1] - pts[0]
            nvec = np.array([tang[1], -tang[0]])
            areas[k] = np.linalg.norm(tang)
        else:
            nvec = np.cross(pts[1] - pts[0], pts[2] - pts[0])
            areas[k] = 0.5 * np.linalg.norm(nvec)
        nvec = nvec / np.linalg.norm(nvec)
        if np.dot(nvec, pts[0] - centroid) < 0:
            nvec = -nvec
        normals[k] = nvec
    return GeometricMap(jac, det, inv_t, normals, areas, vertices)


# ---------------------------------------------------------------------------
# Macro-element C0 layout (Kuhn subdivision of the path simplex)
# ---------------------------------------------------------------------------

def kuhn_vertices(d):
    """Vertices of the path simplex {1 >= x_1 >= .. >= x_d >= 0}."""
    verts = np.zeros((d + 1, d))
    for k in range(1, d + 1):
        verts[k, :k] = 1.0
    return verts


def kuhn_subdivision(m, d):
    """All m^d sub-simplices of the path simplex, positively oriented.

    The sub-simplices are the Kuhn cells of the 1/m grid whose centroid lies
    in the path simplex; odd-permutation cells get their last two vertices
    swapped to restore positive orientation.
    """
    subs = []
    for cell in itertools.product(range(m), repeat=d):
        base = np.array(cell, dtype=float)
        for perm in itertools.permutations(range(d)):
            verts = np.zeros((d + 1, d))
            verts[0] = base
            acc = base.copy()
            for k, axis in enumerate(perm):
                acc = acc.copy()
                acc[axis] += 1.0
                verts[k + 1] = acc
            verts = verts / m
            centroid = verts.mean(axis=0)
            if np.all(np.diff(centroid) <= 1e-12):
                jac = (verts[1:] - verts[0]).T
                if np.linalg.det(jac) < 0:
                    verts[[d - 1, d]] = verts[[d, d - 1]]
                subs.append(verts)
    if len(subs) != m ** d:
        raise InvalidConfig(
            f"Kuhn subdivision produced {len(subs)} cells, expected {m ** d}"
        )
    return np.array(subs)


def _macro_face_planes(d):
    """Face predicates of the path simplex as (normal, offset); face k is
    opposite Kuhn vertex k: x_1 = 1, then x_k = x_{k+1}, then x_d = 0."""
    planes = []
    n = np.zeros(d)
    n[0] = 1.0
    planes.append((n, 1.0))
    for k in range(1, d):
        n = np.zeros(d)
        n[k - 1], n[k] = 1.0, -1.0
        planes.append((n, 0.0))
    n = np.zeros(d)
    n[d - 1] = 1.0
    planes.append((n, 0.0))
    return planes


def _dedup_rows(points):
    """Stable unique ids for rows that agree to ~1e-7, robust to grid straddle.

    Rows are labeled on two offset quantization grids and merged; duplicate
    rows (distance ~1e-14) cannot straddle a cell boundary of both grids,
    while distinct nodes sit far beyond the cell size apart.
    """
    points = np.asarray(points, dtype=float)
    n = len(points)
    parent = np.arange(n)

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for offset in (0.0, 0.5e-6):
        rounded = np.round(points + offset, 6) + 0.0
        groups = {}
        for i, key in enumerate(map(tuple, rounded)):
            j = groups.setdefault(key, i)
            if j != i:
                parent[find(i)] = find(j)

    ids = np.empty(n, dtype=np.int64)
    remap = {}
    reps = []
    for i in range(n):
        r = find(i)
        if r not in remap:
            remap[r] = len(reps)
            reps.append(i)
        ids[i] = remap[r]
    return ids, points[reps]


@dataclass
class MacroC0Map:
    """Reference-level layout of one macro-simplex subdivided m-fold.

    scatter maps (sub_element, local_node) to macro-unique C0 node ids;
    face_tiles[f] lists the (sub_element, local_face) pairs tiling macro
    face f; face_scatter[f] maps (tile, facet_node) to face-unique trace
    node ids.
    """

    m: int
    p: int
    d: int
    sub_vertices: np.ndarray    # (m^d, d+1, d) in path-simplex coordinates
    scatter: np.ndarray         # (m^d, n_elem_nodes) -> unique node ids
    n_unique: int
    unique_nodes: np.ndarray    # (n_unique, d)
    face_tiles: list            # per macro face: [(sub, local_face), ..]
    face_scatter: list          # per macro face: (n_tiles, n_facet_nodes)
    n_face_unique: int
    face_unique_nodes: list     # per macro face: (n_face_unique, d)

    @property
    def n_sub(self):
        return len(self.sub_vertices)


def macro_c0_map(m, p, d, basis=None):
    """Build the C0 node-sharing layout of an m-subdivided macro-simplex."""
    if m < 1:
        raise InvalidConfig(f"subdivision count must be >= 1, got {m}")
    basis = basis or ReferenceBasis(p, d)
    subs = kuhn_subdivision(m, d)
    nsub = len(subs)

    all_nodes = []
    for s in range(nsub):
        jac = (subs[s, 1:] - subs[s, 0]).T
        all_nodes.append(subs[s, 0] + basis.nodes @ jac.T)
    ids, unique = _dedup_rows(np.concatenate(all_nodes, axis=0))
    scatter = ids.reshape(nsub, basis.n_nodes)
    expected = math.comb(m * p + d, d)
    if len(unique) != expected:
        raise InvalidConfig(
            f"C0 node count {len(unique)} != lattice count {expected} "
            f"(m={m}, p={p}, d={d})"
        )

    planes = _macro_face_planes(d)
    face_tiles = [[] for _ in planes]
    for s in range(nsub):
        for f, fverts in enumerate(reference_face_vertices(d)):
            pts = subs[s, list(fverts)]
            for mf, (nrm, off) in enumerate(planes):
                if np.all(np.abs(pts @ nrm - off) < 1e-12):
                    face_tiles[mf].append((s, f))
                    break
    for mf, tiles in enumerate(face_tiles):
        if len(tiles) != m ** (d - 1):
            raise InvalidConfig(
                f"macro face {mf} has {len(tiles)} tiles, expected {m ** (d - 1)}"
            )

    facet_nodes = basis.facet.nodes if d > 1 else np.zeros((1, 0))
    face_scatter = []
    face_unique_nodes = []
    n_face_unique = math.comb(m * p + d - 1, d - 1)
    for mf, tiles in enumerate(face_tiles):
        pts = []
        for s, f in tiles:
            fverts = reference_face_vertices(d)[f]
            v0 = subs[s, fverts[0]]
            span = (subs[s, list(fverts[1:])] - v0).T
            pts.append(v0 + facet_nodes @ span.T)
        fids, funique = _dedup_rows(np.concatenate(pts, axis=0))
        if len(funique) != n_face_unique:
            raise InvalidConfig(
                f"face C0 node count {len(funique)} != lattice count "
                f"{n_face_unique} (m={m}, p={p}, d={d})"
            )
        face_scatter.append(fids.reshape(len(tiles), len(facet_nodes)))
        face_unique_nodes.append(funique)

    return MacroC0Map(
        m=m, p=p, d=d, sub_vertices=subs, scatter=scatter,
        n_unique=len(unique), unique_nodes=unique,
        face_tiles=face_tiles, face_scatter=face_scatter,
        n_face_unique=n_face_unique, face_unique_nodes=face_unique_nodes,
    )
