"""Interface fluxes for the trace-coupled scheme.

All fluxes take the interior state u and the interface (trace) state u_hat as
conservative arrays (..., n_s) plus unit normals (..., d), broadcast over
leading axes, and are complex-safe for complex-step differentiation.  Jumps
are oriented trace minus interior throughout.

Penalty and dissipation terms all enter with a minus sign on the jump, which
upwinds the trace equation (the opposite orientation makes the scalar
advection limit select the downwind value and breaks coercivity of the
diffusive penalty).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfig
from .gas import GasModel, ViscousParams, branch_abs, complex_step_jacobian

FLUX_KINDS = ("lf", "ec", "es", "kepes")


@dataclass(frozen=True)
class DissipationSpec:
    """Selects the interface flux family.

    lf: central average with scalar wavespeed dissipation on the state jump.
    ec: entropy-conservative two-point flux, no dissipation.
    es: ec plus scalar wavespeed dissipation on the state jump.
    kepes: ec plus eigenvector-scaled dissipation on the entropy-variable
    jump; keeps the kinetic-energy-consistent structure of the mean flux.
    """

    kind: str = "kepes"

    def __post_init__(self):
        if self.kind not in FLUX_KINDS:
            raise InvalidConfig(
                f"flux kind {self.kind!r} not one of {FLUX_KINDS}"
            )


def log_mean(a, b):
    """Logarithmic mean (b - a) / log(b / a), series form near b = a."""
    a = np.asarray(a)
    b = np.asarray(b)
    ratio = b / a
    near = np.abs(np.real(ratio) - 1.0) < 1e-4
    zeta = (b - a) / (b + a)
    z2 = zeta * zeta
    series = (a + b) / (2 * (1 + z2 * (1 / 3 + z2 * (1 / 5 + z2 / 7))))
    safe = np.where(near, 2.0, ratio)
    exact = (b - a) / np.log(safe)
    return np.where(near, series, exact)


def tangent_basis(normal):
    """Unit tangents completing the normal to an orthonormal frame.

    Returns a (d-1)-tuple of arrays shaped like normal.  Normals are
    geometric data and must be real.
    """
    normal = np.asarray(normal, dtype=float)
    d = normal.shape[-1]
    if d == 2:
        t1 = np.stack([-normal[..., 1], normal[..., 0]], axis=-1)
        return (t1,)
    if d != 3:
        raise InvalidConfig(f"no tangent basis in dimension {d}")
    k = np.argmin(np.abs(normal), axis=-1)
    e = np.eye(3)[k]
    t1 = e - np.sum(e * normal, axis=-1)[..., None] * normal
    t1 = t1 / np.linalg.norm(t1, axis=-1)[..., None]
    t2 = np.cross(normal, t1)
    return t1, t2


# ---------------------------------------------------------------------------
# mean quantities shared by the entropy-consistent fluxes
# ---------------------------------------------------------------------------

def _two_point_means(gas, u, u_hat):
    rho, vel, pressure = gas.primitive(u)
    rho_h, vel_h, pressure_h = gas.primitive(u_hat)
    beta = rho / pressure
    beta_h = rho_h / pressure_h
    return {
        "rho_ln": log_mean(rho, rho_h),
        "beta_ln": log_mean(beta, beta_h),
        "rho_avg": 0.5 * (rho + rho_h),
        "beta_avg": 0.5 * (beta + beta_h),
        "vel_avg": 0.5 * (vel + vel_h),
        "vv_avg": 0.5 * (np.sum(vel * vel, axis=-1)
                         + np.sum(vel_h * vel_h, axis=-1)),
        "pressure": pressure,
        "pressure_hat": pressure_h,
    }


def ec_flux(gas, u, u_hat, normal):
    """Entropy-conservative two-point flux in the normal direction."""
    m = _two_point_means(gas, u, u_hat)
    p_bar = m["rho_avg"] / m["beta_avg"]
    vn_bar = np.sum(m["vel_avg"] * normal, axis=-1)
    f = np.empty(np.broadcast_shapes(u.shape, u_hat.shape),
                 dtype=np.result_type(u, u_hat))
    f1 = m["rho_ln"] * vn_bar
    f[..., 0] = f1
    f_mom = m["vel_avg"] * f1[..., None] + p_bar[..., None] * normal
    f[..., 1:-1] = f_mom
    f[..., -1] = (
        1.0 / (m["beta_ln"] * (gas.gamma - 1)) - 0.5 * m["vv_avg"]
    ) * f1 + np.sum(m["vel_avg"] * f_mom, axis=-1)
    return f


def lf_flux_conservative(gas, u, u_hat, normal):
    """Central average with scalar dissipation scaled at the trace state."""
    central = 0.5 * (gas.flux_normal(u, normal) + gas.flux_normal(u_hat, normal))
    lam = gas.max_wavespeed(u_hat, normal)
    return central - 0.5 * lam[..., None] * (u_hat - u)


def es_flux(gas, u, u_hat, normal):
    """Entropy-conservative flux plus scalar dissipation on the state jump.

    The wavespeed is the two-sided maximum; with the jump taken between the
    conservative states of the two entropy-variable arguments the added term
    is sign-definite against the entropy-variable jump, so the interface
    entropy residual is non-positive for arbitrary admissible pairs.
    """
    lam_i = gas.max_wavespeed(u, normal)
    lam_h = gas.max_wavespeed(u_hat, normal)
    lam = np.where(np.real(lam_i) > np.real(lam_h), lam_i, lam_h)
    return ec_flux(gas, u, u_hat, normal) - 0.5 * lam[..., None] * (u_hat - u)


def kepes_eigensystem(gas, u, u_hat, normal):
    """Averaged eigenvectors R, scaling diagonal T and signed wavespeeds.

    R diag(T) R^T equals the change-of-variables matrix at the averaged
    state, so R diag(|lam| T) R^T is a symmetric positive semidefinite
    dissipation operator acting on entropy-variable jumps.
    """
    m = _two_point_means(gas, u, u_hat)
    d = u.shape[-1] - 2
    n_s = d + 2
    rho_ln = m["rho_ln"]
    p_bar = m["rho_avg"] / m["beta_avg"]
    vel = m["vel_avg"]
    vn = np.sum(vel * normal, axis=-1)
    c_bar = np.sqrt(gas.gamma * p_bar / rho_ln)
    h_bar = gas.gamma / (m["beta_ln"] * (gas.gamma - 1)) + 0.5 * m["vv_avg"]

    dtype = np.result_type(u, u_hat)
    shape = np.broadcast_shapes(u.shape, u_hat.shape)
    r = np.zeros(shape[:-1] + (n_s, n_s), dtype=dtype)
    r[..., 0, 0] = 1.0
    r[..., 1:-1, 0] = vel - c_bar[..., None] * normal
    r[..., -1, 0] = h_bar - c_bar * vn
    r[..., 0, 1] = 1.0
    r[..., 1:-1, 1] = vel
    r[..., -1, 1] = 0.5 * m["vv_avg"]
    for k, tang in enumerate(tangent_basis(normal)):
        r[..., 1:-1, 2 + k] = tang
        r[..., -1, 2 + k] = np.sum(vel * tang, axis=-1)
    r[..., 0, -1] = 1.0
    r[..., 1:-1, -1] = vel + c_bar[..., None] * normal
    r[..., -1, -1] = h_bar + c_bar * vn

    t_diag = np.empty(shape, dtype=dtype)
    t_diag[..., 0] = rho_ln / (2 * gas.gamma)
    t_diag[..., 1] = rho_ln * (gas.gamma - 1) / gas.gamma
    t_diag[..., 2:-1] = p_bar[..., None]
    t_diag[..., -1] = rho_ln / (2 * gas.gamma)

    lam = np.empty(shape, dtype=dtype)
    lam[..., 0] = vn - c_bar
    lam[..., 1:-1] = vn[..., None]
    lam[..., -1] = vn + c_bar
    return r, t_diag, lam, vn, c_bar


def _blended_abs_eigenvalues(gas, u, u_hat, lam, vn, c_bar):
    # theta ~ sqrt(|dp|/(p+p_hat)) blends toward the full-wave speed at
    # strong pressure jumps; x/sqrt(x+cut) regularizes the square-root
    # branch point at coincident pressures so the linearization stays
    # finite there (relative deviation from sqrt(x) is below cut/(2x)).
    p = gas.primitive(u)[2]
    p_hat = gas.primitive(u_hat)[2]
    x = branch_abs(p - p_hat) / (p + p_hat)
    theta = x / np.sqrt(x + 1e-12)
    full = branch_abs(vn) + c_bar
    return (1 - theta[..., None]) * branch_abs(lam) + theta[..., None] * full[..., None]


def kepes_flux(gas, u, u_hat, normal):
    """Entropy-conservative flux plus eigenvector-scaled matrix dissipation.

    Eigenvalue magnitudes blend towards the full wavespeed |vn| + c as the
    pressure jump grows (equal weights at a pressure ratio of 3).
    """
    r, t_diag, lam, vn, c_bar = kepes_eigensystem(gas, u, u_hat, normal)
    lam_abs = _blended_abs_eigenvalues(gas, u, u_hat, lam, vn, c_bar)
    dv = gas.entropy_vars(u_hat) - gas.entropy_vars(u)
    w = np.einsum("...ij,...i->...j", r, dv)
    return ec_flux(gas, u, u_hat, normal) - 0.5 * np.einsum(
        "...ij,...j->...i", r, lam_abs * t_diag * w
    )


def kepes_dissipation_matrix(gas, u, u_hat, normal):
    """The symmetric PSD operator D with kepes = ec - (1/2) D (v_hat - v)."""
    r, t_diag, lam, vn, c_bar = kepes_eigensystem(gas, u, u_hat, normal)
    lam_abs = _blended_abs_eigenvalues(gas, u, u_hat, lam, vn, c_bar)
    return np.einsum("...ik,...k,...jk->...ij", r, lam_abs * t_diag, r)


def viscous_numerical_flux(gas, vp, viscous_normal_flux, w, w_hat):
    """Interface diffusive flux: interior normal flux plus a trace penalty.

    w and w_hat are the working-variable states (conservative or entropy,
    matching the formulation); the penalty weights rows by the diffusive
    coefficients and vanishes on the mass row.
    """
    d = w.shape[-1] - 2
    diag = vp.penalty_diagonal(gas.gamma, d)
    return viscous_normal_flux - 0.5 * diag * (w_hat - w)


def interface_flux(gas, spec, u, u_hat, normal):
    """Dispatch on the dissipation family."""
    if spec.kind == "lf":
        return lf_flux_conservative(gas, u, u_hat, normal)
    if spec.kind == "ec":
        return ec_flux(gas, u, u_hat, normal)
    if spec.kind == "es":
        return es_flux(gas, u, u_hat, normal)
    return kepes_flux(gas, u, u_hat, normal)


def entropy_flux_residual(gas, u, u_hat, normal, flux_normal_value):
    """Interface entropy balance (v_hat - v) . F - (psi_hat - psi).

    Zero for the entropy-conservative flux; non-positive for the dissipative
    entropy-consistent fluxes.
    """
    dv = gas.entropy_vars(u_hat) - gas.entropy_vars(u)
    dpsi = gas.entropy_potential_normal(u_hat, normal) - gas.entropy_potential_normal(
        u, normal
    )
    return np.sum(dv * flux_normal_value, axis=-1) - dpsi


# ---------------------------------------------------------------------------
# ensemble verification (shared by the command line and the test suite)
# ---------------------------------------------------------------------------

def random_state_pairs(d, n, rng, rho_range=(0.1, 10.0), p_range=(0.1, 10.0),
                       vmax=3.0, gas=None):
    gas = gas or GasModel()

    def states(count):
        rho = rng.uniform(*rho_range, size=count)
        pressure = rng.uniform(*p_range, size=count)
        direction = rng.standard_normal((count, d))
        direction /= np.linalg.norm(direction, axis=-1, keepdims=True)
        vel = direction * rng.uniform(0, vmax, size=(count, 1))
        return gas.conservative(rho, vel, pressure)

    normal = rng.standard_normal((n, d))
    normal /= np.linalg.norm(normal, axis=-1, keepdims=True)
    return states(n), states(n), normal


def run_flux_checks(samples=10000, dims=(2, 3), seed=20260816, gas=None):
    """Verify the algebraic flux properties on a random ensemble.

    Returns {d: {name: worst_value}} where each entry is already normalized
    so that the acceptance thresholds apply directly: identities report
    |error| / scale, inequalities report the signed residual / scale (only
    positive values are violations).
    """
    gas = gas or GasModel()
    rng = np.random.default_rng(seed)
    report = {}
    for d in dims:
        u, u_hat, normal = random_state_pairs(d, samples, rng, gas=gas)
        psi_scale = (
            branch_abs(gas.entropy_potential_normal(u, normal))
            + branch_abs(gas.entropy_potential_normal(u_hat, normal))
            + 1.0
        )

        f_ec = ec_flux(gas, u, u_hat, normal)
        r_ec = entropy_flux_residual(gas, u, u_hat, normal, f_ec)
        f_es = es_flux(gas, u, u_hat, normal)
        r_es = entropy_flux_residual(gas, u, u_hat, normal, f_es)
        f_kep = kepes_flux(gas, u, u_hat, normal)
        r_kep = entropy_flux_residual(gas, u, u_hat, normal, f_kep)

        # dissipation equals the explicit quadratic form
        dv = gas.entropy_vars(u_hat) - gas.entropy_vars(u)
        dmat = kepes_dissipation_matrix(gas, u, u_hat, normal)
        quad = -0.5 * np.einsum("ni,nij,nj->n", dv, dmat, dv)
        quad_err = np.abs(r_kep - quad) / (np.abs(quad) + 1.0)

        # mean-flux structure: the momentum component of the
        # entropy-conservative flux is the mean velocity times the mass flux
        # plus a consistent pressure mean along the normal
        rho_i, vel_i, p_i = gas.primitive(u)
        rho_h, vel_h, p_h = gas.primitive(u_hat)
        vel_avg = 0.5 * (vel_i + vel_h)
        p_bar = (rho_i + rho_h) / (rho_i / p_i + rho_h / p_h)
        resid = (
            f_ec[..., 1:-1]
            - vel_avg * f_ec[..., 0][..., None]
            - p_bar[..., None] * normal
        )
        kep_struct = np.abs(resid).max(axis=-1) / (
            np.abs(f_ec[..., 1:-1]).max(axis=-1) + 1.0
        )

        # consistency at coincident states: R T R^T reproduces du/dv and
        # R lam T R^T reproduces the entropy-symmetrized flux jacobian
        n_small = min(samples, 50)
        us = u[:n_small]
        ns = normal[:n_small]
        r, t_diag, lam, _, _ = kepes_eigensystem(gas, us, us, ns)
        a0_barth = np.einsum("nik,nk,njk->nij", r, t_diag, r)
        a0 = gas.change_of_variables_matrix(us)
        barth_a0 = np.abs(a0_barth - a0).max() / np.abs(a0).max()
        jac_barth = np.einsum("nik,nk,njk->nij", r, lam * t_diag, r)
        v_s = gas.entropy_vars(us)
        jac_cs = complex_step_jacobian(
            lambda vv: gas.flux_normal(gas.from_entropy(vv), ns), v_s
        )
        barth_jac = np.abs(jac_barth - jac_cs).max() / np.abs(jac_cs).max()

        # coincident-state consistency of every flux with the exact flux
        fn = gas.flux_normal(us, ns)
        spec_err = {}
        for kind in FLUX_KINDS:
            f_self = interface_flux(gas, DissipationSpec(kind), us, us, ns)
            spec_err[kind] = np.abs(f_self - fn).max() / (np.abs(fn).max() + 1.0)

        report[d] = {
            "samples": samples,
            "ec_identity": float(np.max(np.abs(r_ec) / psi_scale)),
            "es_violation": float(np.max(r_es / psi_scale)),
            "kepes_violation": float(np.max(r_kep / psi_scale)),
            "quadratic_form": float(np.max(quad_err)),
            "kep_structure": float(np.max(kep_struct)),
            "barth_scaling": float(barth_a0),
            "barth_jacobian": float(barth_jac),
            "consistency": float(max(spec_err.values())),
        }
    return report
