"""Macro-element hybridized solver for compressible gas dynamics.

Continuous finite elements inside each macro-simplex, trace unknowns on the
macro skeleton only, entropy-consistent interface fluxes, and an implicit
Runge-Kutta time march driven by a statically condensed Newton-Krylov solver.
"""

__version__ = "0.1.0"

__all__ = [
    "GasModel",
    "DissipationSpec",
    "interface_flux",
    "entropy_flux_residual",
    "MacroMesh",
    "Discretization",
    "DIRKIntegrator",
    "NewtonParams",
    "IsentropicVortex",
    "TaylorGreen",
    "load_config",
    "run_simulation",
    "__version__",
]

_EXPORT_HOMES = {
    "GasModel": "gas",
    "DissipationSpec": "fluxes",
    "interface_flux": "fluxes",
    "entropy_flux_residual": "fluxes",
    "MacroMesh": "mesh",
    "Discretization": "assembly",
    "DIRKIntegrator": "time_march",
    "NewtonParams": "time_march",
    "IsentropicVortex": "cases",
    "TaylorGreen": "cases",
    "load_config": "driver",
    "run_simulation": "driver",
}


def __getattr__(name):
    home = _EXPORT_HOMES.get(name)
    if home is None:
        raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
    import importlib

    return getattr(importlib.import_module(f".{home}", __name__), name)


def __dir__():
    return sorted(set(globals()) | set(_EXPORT_HOMES))
