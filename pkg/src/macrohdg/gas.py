"""Perfect-gas thermodynamics and flux algebra.

State arrays are shaped (..., n_s) with components (density, momentum,
total energy density); n_s = d + 2 fixes the spatial dimension.  Every
function broadcasts over leading axes and accepts complex input so that
complex-step differentiation of anything built from these maps is exact to
machine precision.

Two working variable sets are supported: the conservative state u and the
entropy variables v (the gradient of the convex entropy density with respect
to u).  The entropy density used throughout is

    H(u) = -rho * s / (gamma - 1),        s = log(P / rho^gamma),

whose flux is H * velocity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonAdmissibleEntropyState, NonAdmissibleState


def branch_abs(x):
    """|x| that follows the real branch, exact for complex-step inputs."""
    return np.where(np.real(x) >= 0, x, -x)


def complex_step_jacobian(f, x, eps=1e-150):
    """Differentiate f w.r.t. the last axis of x: returns (..., n_out, n_in).

    f must map (..., n_in) -> (..., n_out) and be complex-safe; eps is far
    below any representable perturbation so no subtractive cancellation
    occurs.
    """
    x = np.asarray(x, dtype=float)
    cols = []
    for k in range(x.shape[-1]):
        xc = x.astype(complex)
        xc[..., k] += 1j * eps
        cols.append(np.imag(f(xc)) / eps)
    return np.stack(cols, axis=-1)


@dataclass(frozen=True)
class ViscousParams:
    """Diffusive closure coefficients as they enter the equations.

    reynolds is the prefactor actually used in the stress term (callers
    convert convective Reynolds numbers before constructing this); mach
    scales the heat flux through the nondimensional temperature.
    """

    reynolds: float
    mach: float
    prandtl: float = 0.72
    mu: float = 1.0

    def shear_coefficient(self):
        return self.mu / self.reynolds

    def heat_coefficient(self, gamma):
        return self.mu / (
            self.reynolds * (gamma - 1) * self.mach ** 2 * self.prandtl
        )

    def penalty_diagonal(self, gamma, d):
        """Diagonal trace-penalty weights: zero mass row, shear for momentum,
        heat coefficient for energy."""
        diag = np.empty(d + 2)
        diag[0] = 0.0
        diag[1:-1] = self.shear_coefficient()
        diag[-1] = self.heat_coefficient(gamma)
        return diag


@dataclass(frozen=True)
class GasModel:
    """Calorically perfect gas with ratio of specific heats gamma."""

    gamma: float = 1.4

    # -- basic decompositions ------------------------------------------------

    @staticmethod
    def split(u):
        return u[..., 0], u[..., 1:-1], u[..., -1]

    def primitive(self, u):
        """(density, velocity, pressure) from the conservative state."""
        rho, mom, rho_e = self.split(u)
        vel = mom / rho[..., None]
        pressure = (self.gamma - 1) * (
            rho_e - 0.5 * np.sum(mom * vel, axis=-1)
        )
        return rho, vel, pressure

    def conservative(self, rho, vel, pressure):
        rho = np.asarray(rho)
        vel = np.asarray(vel)
        pressure = np.asarray(pressure)
        dtype = np.result_type(rho, vel, pressure, float)
        u = np.empty(vel.shape[:-1] + (vel.shape[-1] + 2,), dtype=dtype)
        u[..., 0] = rho
        u[..., 1:-1] = rho[..., None] * vel
        u[..., -1] = pressure / (self.gamma - 1) + 0.5 * rho * np.sum(
            vel * vel, axis=-1
        )
        return u

    def pressure(self, u):
        return self.primitive(u)[2]

    def temperature(self, u):
        rho, _, pressure = self.primitive(u)
        return self.gamma * pressure / rho

    def sound_speed(self, u):
        rho, _, pressure = self.primitive(u)
        return np.sqrt(self.gamma * pressure / rho)

    def max_wavespeed(self, u, normal):
        rho, vel, pressure = self.primitive(u)
        vn = np.sum(vel * normal, axis=-1)
        return branch_abs(vn) + np.sqrt(self.gamma * pressure / rho)

    def check_admissible(self, u, where=""):
        rho, _, pressure = self.primitive(u)
        if not (np.all(np.real(rho) > 0) and np.all(np.real(pressure) > 0)):
            raise NonAdmissibleState(
                "non-positive density or pressure", where=where
            )

    # -- entropy structure ---------------------------------------------------

    def specific_entropy(self, u):
        rho, _, pressure = self.primitive(u)
        return np.log(pressure) - self.gamma * np.log(rho)

    def entropy_density(self, u):
        rho = u[..., 0]
        return -rho * self.specific_entropy(u) / (self.gamma - 1)

    def entropy_density_flux(self, u):
        _, vel, _ = self.primitive(u)
        return self.entropy_density(u)[..., None] * vel

    def entropy_vars(self, u):
        rho, vel, pressure = self.primitive(u)
        s = np.log(pressure) - self.gamma * np.log(rho)
        beta = rho / pressure
        v = np.empty_like(u)
        v[..., 0] = (self.gamma - s) / (self.gamma - 1) - 0.5 * beta * np.sum(
            vel * vel, axis=-1
        )
        v[..., 1:-1] = beta[..., None] * vel
        v[..., -1] = -beta
        return v

    def from_entropy(self, v, where=""):
        beta = -v[..., -1]
        if not np.all(np.real(beta) > 0):
            raise NonAdmissibleEntropyState(
                "non-positive inverse temperature", where=where
            )
        vel = v[..., 1:-1] / beta[..., None]
        s = self.gamma - (self.gamma - 1) * (
            v[..., 0] + 0.5 * beta * np.sum(vel * vel, axis=-1)
        )
        rho = np.exp(-(s + np.log(beta)) / (self.gamma - 1))
        return self.conservative(rho, vel, rho / beta)

    def entropy_potential_normal(self, u, normal):
        """Normal flux potential: density times normal velocity."""
        return np.sum(u[..., 1:-1] * normal, axis=-1)

    def change_of_variables_matrix(self, u):
        """Symmetric positive definite du/dv as a closed form: (..., n_s, n_s)."""
        rho, vel, pressure = self.primitive(u)
        rho_e = u[..., -1]
        h_tot = (rho_e + pressure) / rho
        n_s = u.shape[-1]
        a0 = np.zeros(u.shape + (n_s,), dtype=u.dtype)
        a0[..., 0, 0] = rho
        a0[..., 0, 1:-1] = u[..., 1:-1]
        a0[..., 1:-1, 0] = u[..., 1:-1]
        a0[..., 0, -1] = rho_e
        a0[..., -1, 0] = rho_e
        mom_outer = u[..., 1:-1, None] * vel[..., None, :]
        a0[..., 1:-1, 1:-1] = mom_outer
        idx = np.arange(1, n_s - 1)
        a0[..., idx, idx] += pressure[..., None]
        rhv = rho[..., None] * h_tot[..., None] * vel
        a0[..., 1:-1, -1] = rhv
        a0[..., -1, 1:-1] = rhv
        a0[..., -1, -1] = (
            rho * h_tot ** 2 - self.gamma * pressure ** 2 / ((self.gamma - 1) * rho)
        )
        return a0

    # -- inviscid flux -------------------------------------------------------

    def flux(self, u):
        """Advective flux tensor: (..., n_s, d)."""
        rho, vel, pressure = self.primitive(u)
        n_s = u.shape[-1]
        d = n_s - 2
        f = np.empty(u.shape + (d,), dtype=u.dtype)
        f[..., 0, :] = u[..., 1:-1]
        f[..., 1:-1, :] = u[..., 1:-1, None] * vel[..., None, :]
        idx = np.arange(d)
        f[..., idx + 1, idx] += pressure[..., None]
        f[..., -1, :] = (u[..., -1] + pressure)[..., None] * vel
        return f

    def flux_normal(self, u, normal):
        rho, vel, pressure = self.primitive(u)
        vn = np.sum(vel * normal, axis=-1)
        f = np.empty_like(u)
        f[..., 0] = np.sum(u[..., 1:-1] * normal, axis=-1)
        f[..., 1:-1] = u[..., 1:-1] * vn[..., None] + pressure[..., None] * normal
        f[..., -1] = (u[..., -1] + pressure) * vn
        return f

    # -- gradient extraction for the diffusive terms -------------------------

    def velocity_temperature_gradients(self, u, grad_u):
        """(grad_vel, grad_temp) from the conservative state and its gradient.

        grad_u has shape (..., n_s, d); grad_vel[..., i, j] = dV_i/dx_j.
        """
        rho, vel, pressure = self.primitive(u)
        grad_rho = grad_u[..., 0, :]
        grad_mom = grad_u[..., 1:-1, :]
        grad_rho_e = grad_u[..., -1, :]
        grad_vel = (
            grad_mom - vel[..., None] * grad_rho[..., None, :]
        ) / rho[..., None, None]
        ke = 0.5 * np.sum(vel * vel, axis=-1)
        conv = np.sum(u[..., 1:-1, None] * grad_vel, axis=-2)
        grad_p = (self.gamma - 1) * (
            grad_rho_e - ke[..., None] * grad_rho - conv
        )
        grad_temp = self.gamma * (
            rho[..., None] * grad_p - pressure[..., None] * grad_rho
        ) / rho[..., None] ** 2
        return grad_vel, grad_temp

    def velocity_temperature_gradients_entropy(self, v, grad_v):
        """Same extraction when the working variables are entropy variables."""
        v_e = v[..., -1]
        grad_ve = grad_v[..., -1, :]
        grad_vm = grad_v[..., 1:-1, :]
        ve2 = v_e[..., None, None] ** 2
        grad_vel = (
            v[..., 1:-1, None] * grad_ve[..., None, :]
            - v_e[..., None, None] * grad_vm
        ) / ve2
        grad_temp = self.gamma * grad_ve / v_e[..., None] ** 2
        return grad_vel, grad_temp

    def viscous_flux(self, vp, vel, grad_vel, grad_temp):
        """Diffusive flux tensor G with the sign convention
        d_t u + div(F + G) = 0: (..., n_s, d)."""
        mu_eff = vp.shear_coefficient()
        kappa_eff = vp.heat_coefficient(self.gamma)
        d = vel.shape[-1]
        div = np.trace(grad_vel, axis1=-2, axis2=-1)
        tau = mu_eff * (grad_vel + np.swapaxes(grad_vel, -1, -2))
        idx = np.arange(d)
        tau[..., idx, idx] -= (2.0 / 3.0) * mu_eff * div[..., None]
        g = np.zeros(vel.shape[:-1] + (d + 2, d), dtype=grad_vel.dtype)
        g[..., 1:-1, :] = -tau
        g[..., -1, :] = -(
            np.sum(tau * vel[..., :, None], axis=-2) + kappa_eff * grad_temp
        )
        return g
