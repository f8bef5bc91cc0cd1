"""Benchmark orchestration: config files, runs, studies, and reports.

Configuration is a flat text file of ``key = value`` lines with dotted
keys grouped by prefix (case.*, physics.*, disc.*, time.*, solver.*,
output.*).  Unknown keys are hard errors so a typo cannot silently fall
back to a default.  ``run_simulation`` drives the implicit integrator and
writes monitors, solver telemetry, VTK snapshots, and a machine-readable
summary; ``convergence_study`` and ``dof_report`` back the corresponding
command line verbs.
"""

from __future__ import annotations

import csv
import math
import time as _time
from dataclasses import dataclass, field, fields as dc_fields
from pathlib import Path

import numpy as np

from .assembly import Discretization
from .cases import IsentropicVortex, TaylorGreen
from .errors import InvalidConfig, StepFailure
from .fem import unit_simplex_vertices
from .fluxes import DissipationSpec
from .gas import GasModel, ViscousParams
from .mesh import build_box_macro_mesh, dof_counts, write_vtk
from .time_march import DIRKIntegrator, NewtonParams

CASE_NAMES = ("vortex2d", "vortex3d", "tgv")
MONITOR_COLUMNS = (
    "time",
    "generalized_entropy",
    "thermo_entropy",
    "kinetic_energy",
    "dissipation_rate",
    "max_residual",
)
TELEMETRY_COLUMNS = (
    "step", "time", "stage", "newton_iters", "residual", "fgmres_iters",
    "inner_iters_total", "jacobian_builds", "tau_final",
    "condense_seconds", "matvec_seconds", "recovery_seconds",
)


@dataclass
class CaseConfig:
    """Resolved configuration for one benchmark run."""

    case: str = ""
    mach: float = None
    strength: float = 2.5
    angle: float = 0.0
    v_inf: float = 1.0
    center: tuple = (0.0, 0.0)
    half_width: float = 5.0
    gamma: float = 1.4
    reynolds: float = 0.0
    prandtl: float = 0.72
    p: int = None
    m: int = 1
    n: int = None
    formulation: str = "entropy"
    flux: str = "kepes"
    periodic: bool = True
    dt: float = None
    dt_over_tc: float = None
    t_final: float = None
    t_final_over_tc: float = None
    newton: NewtonParams = field(default_factory=NewtonParams)
    out_dir: str = None
    snapshot_every: int = 0
    monitor_every: int = 1

    def __post_init__(self):
        if self.case not in CASE_NAMES:
            raise InvalidConfig(
                f"case.name must be one of {CASE_NAMES}, got {self.case!r}"
            )
        if self.p is None or self.n is None:
            raise InvalidConfig("disc.p and disc.n are required")
        for name, lo in (("p", 1), ("m", 1), ("n", 1)):
            val = getattr(self, name)
            if int(val) != val or val < lo:
                raise InvalidConfig(f"disc.{name} must be an integer >= {lo}")
        if self.gamma <= 1.0:
            raise InvalidConfig("physics.gamma must exceed 1")
        if self.reynolds < 0 or self.prandtl <= 0:
            raise InvalidConfig("physics.reynolds must be >= 0 and "
                                "physics.prandtl > 0")
        if self.flux == "lf" and self.formulation != "conservative":
            raise InvalidConfig("the lf flux pairs with the conservative "
                                "formulation")
        if self.flux in ("ec", "es", "kepes") and self.formulation != "entropy":
            raise InvalidConfig(f"the {self.flux} flux requires the entropy "
                                "formulation")
        if self.dt is not None and self.dt_over_tc is not None:
            raise InvalidConfig("set time.dt or time.dt_over_tc, not both")
        if self.t_final is not None and self.t_final_over_tc is not None:
            raise InvalidConfig("set time.t_final or time.t_final_over_tc, "
                                "not both")
        for name in ("mach", "strength", "v_inf", "half_width", "dt",
                     "dt_over_tc", "t_final", "t_final_over_tc"):
            val = getattr(self, name)
            if val is not None and val <= 0:
                raise InvalidConfig(f"{name} must be positive")
        if self.case == "tgv" and not self.periodic:
            raise InvalidConfig("the Taylor-Green case is periodic only")
        if self.snapshot_every < 0 or self.monitor_every < 1:
            raise InvalidConfig("output cadences must be non-negative "
                                "(monitor_every >= 1)")


def _parse_bool(text):
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "on", "1"):
        return True
    if lowered in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_center(text):
    parts = [float(tok) for tok in text.replace(",", " ").split()]
    if len(parts) != 2:
        raise ValueError("expected two coordinates")
    return tuple(parts)


_CONFIG_SCHEMA = {
    "case.name": ("case", str.lower),
    "case.mach": ("mach", float),
    "case.strength": ("strength", float),
    "case.angle": ("angle", float),
    "case.v_inf": ("v_inf", float),
    "case.center": ("center", _parse_center),
    "case.half_width": ("half_width", float),
    "physics.gamma": ("gamma", float),
    "physics.reynolds": ("reynolds", float),
    "physics.prandtl": ("prandtl", float),
    "disc.p": ("p", int),
    "disc.m": ("m", int),
    "disc.n": ("n", int),
    "disc.formulation": ("formulation", str.lower),
    "disc.flux": ("flux", str.lower),
    "disc.periodic": ("periodic", _parse_bool),
    "time.dt": ("dt", float),
    "time.dt_over_tc": ("dt_over_tc", float),
    "time.t_final": ("t_final", float),
    "time.t_final_over_tc": ("t_final_over_tc", float),
    "output.dir": ("out_dir", str),
    "output.snapshot_every": ("snapshot_every", int),
    "output.monitor_every": ("monitor_every", int),
}
_SOLVER_SCHEMA = {
    "solver.abs_tol": ("abs_tol", float),
    "solver.max_iters": ("max_iters", int),
    "solver.tau_init": ("tau_init", float),
    "solver.tau_max": ("tau_max", float),
    "solver.linear_rel_tol": ("linear_rel_tol", float),
    "solver.ser_mode": ("ser_mode", str.lower),
    "solver.restart": ("restart", int),
    "solver.max_outer": ("max_outer", int),
    "solver.inner_rtol": ("inner_rtol", float),
    "solver.inner_iters": ("inner_iters", int),
    "solver.reuse_jacobian": ("reuse_jacobian", _parse_bool),
    "solver.rebuild_ratio": ("rebuild_ratio", float),
    "solver.growth_window": ("growth_window", int),
}


def parse_config(text, source="<string>"):
    """Parse flat key-value configuration text into a CaseConfig."""
    values = {}
    solver_values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(
                f"{source}:{lineno}: expected 'key = value', got {raw!r}"
            )
        key, _, value = line.partition("=")
        key = key.strip().lower()
        value = value.strip()
        if key in _CONFIG_SCHEMA:
            attr, conv = _CONFIG_SCHEMA[key]
            target = values
        elif key in _SOLVER_SCHEMA:
            attr, conv = _SOLVER_SCHEMA[key]
            target = solver_values
        else:
            raise InvalidConfig(f"{source}:{lineno}: unknown key {key!r}")
        if attr in target:
            raise InvalidConfig(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            target[attr] = conv(value)
        except (ValueError, TypeError) as exc:
            raise InvalidConfig(
                f"{source}:{lineno}: bad value for {key!r}: {exc}"
            ) from None
    if "mach" not in values:
        values["mach"] = 0.1 if values.get("case") == "tgv" else 0.5
    return CaseConfig(newton=NewtonParams(**solver_values), **values)


def load_config(path):
    """Read a configuration file; unknown keys are hard errors."""
    path = Path(path)
    return parse_config(path.read_text(), source=str(path))


# ---------------------------------------------------------------------------
# model construction
# ---------------------------------------------------------------------------

def build_case(cfg):
    """Instantiate the flow case described by the configuration."""
    gas = GasModel(gamma=cfg.gamma)
    if cfg.case == "tgv":
        return TaylorGreen(mach=cfg.mach, gas=gas)
    return IsentropicVortex(
        dim=2 if cfg.case == "vortex2d" else 3,
        mach=cfg.mach,
        strength=cfg.strength,
        v_inf=cfg.v_inf,
        angle=cfg.angle,
        half_width=cfg.half_width,
        center=cfg.center,
        gas=gas,
    )


def convective_time(case):
    """Single time unit used by dt_over_tc and t_final_over_tc."""
    if isinstance(case, TaylorGreen):
        return case.convective_time
    return case.convective_period


def _viscosity(cfg, case):
    if cfg.reynolds == 0.0:
        return None
    if isinstance(case, TaylorGreen):
        return case.viscous_params(cfg.reynolds, prandtl=cfg.prandtl)
    # Generic viscous setup: the configured number is the equation-level
    # Reynolds prefactor, not a convectively rescaled one.
    return ViscousParams(reynolds=cfg.reynolds, mach=cfg.mach,
                         prandtl=cfg.prandtl)


def build_discretization(cfg):
    """(case, discretization) pair for a configuration."""
    case = build_case(cfg)
    mesh = build_box_macro_mesh(case.box, n_per_dim=cfg.n, m=cfg.m,
                                periodic=cfg.periodic)
    boundary = None
    if not cfg.periodic:
        from .assembly import boundary_trace_operator
        far = case.state(np.array([[1e6] * mesh.dim]), 0.0)[0]
        boundary = boundary_trace_operator("freestream", far)
    disc = Discretization(
        mesh,
        cfg.p,
        gas=case.gas,
        formulation=cfg.formulation,
        flux=DissipationSpec(cfg.flux),
        viscosity=_viscosity(cfg, case),
        boundary=boundary,
    )
    return case, disc


def resolve_times(cfg, case):
    """(dt, t_final) in physical units; both must be specified."""
    t_c = convective_time(case)
    if cfg.dt is not None:
        dt = cfg.dt
    elif cfg.dt_over_tc is not None:
        dt = cfg.dt_over_tc * t_c
    else:
        raise InvalidConfig("time.dt or time.dt_over_tc is required")
    if cfg.t_final is not None:
        t_final = cfg.t_final
    elif cfg.t_final_over_tc is not None:
        t_final = cfg.t_final_over_tc * t_c
    else:
        raise InvalidConfig("time.t_final or time.t_final_over_tc is "
                            "required")
    return dt, t_final


# ---------------------------------------------------------------------------
# diagnostics and output files
# ---------------------------------------------------------------------------

def admissible_fraction(disc, fields):
    """Fraction of volume quadrature points carrying an admissible state."""
    gas = disc.gas
    ok = 0
    total = 0
    with np.errstate(all="ignore"):
        for s in range(disc.layout.n_sub):
            w_q = np.einsum("qi,eis->eqs", disc.phi,
                            fields.w[:, disc.layout.scatter[s]])
            good = np.isfinite(w_q).all(axis=-1)
            if disc.formulation == "entropy":
                good &= -w_q[..., -1] > 0
            else:
                good &= w_q[..., 0] > 0
                good &= np.where(good, gas.pressure(w_q), -1.0) > 0
            ok += int(good.sum())
            total += good.size
    return ok / total


def monitor_row(disc, fields, t, max_residual=math.nan):
    """One monitors record: integral invariants plus solver residual."""
    vals = disc.integrals(fields)
    if disc.viscosity is None:
        eps = math.nan
    else:
        eps = disc.kinetic_energy_dissipation(fields)
    return {
        "time": t,
        "generalized_entropy": vals["entropy"],
        "thermo_entropy": vals["thermo_entropy"],
        "kinetic_energy": vals["kinetic_energy"],
        "dissipation_rate": eps,
        "max_residual": max_residual,
    }


def write_snapshot(disc, fields, path):
    """Write density, velocity, pressure, Mach, and vorticity magnitude.

    Fields are sampled at the corners of every sub-element, so the file is
    a linear-element view of the solution (adequate for inspection; the
    quadrature-level data stays in the solver).
    """
    mesh = disc.mesh
    d = disc.d
    corners = unit_simplex_vertices(d)
    phi_c = disc.basis.eval_at(corners)
    dphi_c = disc.basis.grad_at(corners)
    sub_v = mesh.sub_vertices
    jac = np.stack([sub_v[:, :, k + 1] - sub_v[:, :, 0] for k in range(d)],
                   axis=-1)
    inv_jac = np.linalg.inv(jac)
    w_sub = fields.w[:, disc.layout.scatter, :]    # (E, n_sub, n_basis, n_s)
    w_c = np.einsum("ci,esit->esct", phi_c, w_sub)
    dw_ref = np.einsum("cik,esit->esctk", dphi_c, w_sub)
    dw = np.einsum("esctk,eska->escta", dw_ref, inv_jac)
    u = disc.to_conservative(w_c, where="snapshot")
    rho, vel, pressure = disc.gas.primitive(u)
    mach = np.sqrt(np.sum(vel * vel, axis=-1)) / disc.gas.sound_speed(u)
    if disc.formulation == "entropy":
        grad_vel, _ = disc.gas.velocity_temperature_gradients_entropy(w_c, dw)
    else:
        grad_vel, _ = disc.gas.velocity_temperature_gradients(w_c, dw)
    if d == 2:
        vort = np.abs(grad_vel[..., 1, 0] - grad_vel[..., 0, 1])
    else:
        wx = grad_vel[..., 2, 1] - grad_vel[..., 1, 2]
        wy = grad_vel[..., 0, 2] - grad_vel[..., 2, 0]
        wz = grad_vel[..., 1, 0] - grad_vel[..., 0, 1]
        vort = np.sqrt(wx**2 + wy**2 + wz**2)
    n_cells = mesh.n_sub_elements
    points = sub_v.reshape(-1, d)
    cells = np.arange(n_cells * (d + 1)).reshape(n_cells, d + 1)
    write_vtk(path, points, cells, d, point_data={
        "density": rho.reshape(-1),
        "velocity": vel.reshape(-1, d),
        "pressure": pressure.reshape(-1),
        "mach": mach.reshape(-1),
        "vorticity_mag": vort.reshape(-1),
    })


def _write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns),
                                extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)


def write_summary(path, summary):
    lines = [f"{key} = {value}" for key, value in summary.items()]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# run orchestration
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    """Outcome of one benchmark run plus its in-memory records."""

    status: str
    t_end: float
    failure_time: float = None
    steps: int = 0
    monitors: list = field(default_factory=list)
    telemetry: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    fields: object = None
    disc: object = None

    @property
    def completed(self):
        return self.status == "completed"


def _aggregate(records):
    totals = {
        "stage_solves": len(records),
        "newton_iters": 0,
        "fgmres_iters": 0,
        "inner_iters": 0,
        "jacobian_builds": 0,
        "jacobian_seconds": 0.0,
        "matvec_seconds": 0.0,
        "recovery_seconds": 0.0,
    }
    for row in records:
        totals["newton_iters"] += row["newton_iters"]
        totals["fgmres_iters"] += row["fgmres_iters"]
        totals["inner_iters"] += row["inner_iters_total"]
        totals["jacobian_builds"] += row["jacobian_builds"]
        totals["jacobian_seconds"] += row["condense_seconds"]
        totals["matvec_seconds"] += row["matvec_seconds"]
        totals["recovery_seconds"] += row["recovery_seconds"]
    # Approximate local/global split of the solver time: Jacobian
    # formation and state recovery are element-local work, the Krylov
    # matvec chain carries the globally coupled part.
    totals["local_seconds"] = (totals["jacobian_seconds"]
                               + totals["recovery_seconds"])
    totals["global_seconds"] = totals["matvec_seconds"]
    return totals


def run_simulation(cfg, out_dir=None, on_step=None):
    """Execute one configured run and write its artifacts.

    Returns a RunResult whose status is "completed" or "blowup"; a blow-up
    is an expected outcome for some configurations, so it is reported, not
    raised.  Artifacts (monitors.csv, telemetry.csv, summary.txt, VTK
    snapshots) are written when an output directory is configured.
    """
    case, disc = build_discretization(cfg)
    dt, t_final = resolve_times(cfg, case)
    directory = Path(out_dir or cfg.out_dir) if (out_dir or cfg.out_dir) \
        else None
    if directory is not None:
        directory.mkdir(parents=True, exist_ok=True)

    fields = disc.project(case.initial)
    monitors = [monitor_row(disc, fields, 0.0)]
    if directory is not None and cfg.snapshot_every:
        write_snapshot(disc, fields, directory / "snapshot_000000.vtk")

    integrator = DIRKIntegrator(disc, params=cfg.newton)
    state = {"last_fields": fields, "steps": 0}

    def _on_step(step, t, new_fields, reports):
        state["last_fields"] = new_fields
        state["steps"] = step
        if step % cfg.monitor_every == 0:
            max_res = max(rep.residual for rep in reports)
            monitors.append(monitor_row(disc, new_fields, t, max_res))
        if directory is not None and cfg.snapshot_every \
                and step % cfg.snapshot_every == 0:
            write_snapshot(disc, new_fields,
                           directory / f"snapshot_{step:06d}.vtk")
        if on_step is not None:
            on_step(step, t, new_fields, reports)

    start = _time.perf_counter()
    failure_time = None
    failure_note = ""
    try:
        fields, t_end = integrator.run(fields, t_final, dt, on_step=_on_step)
        status = "completed"
    except StepFailure as exc:
        status = "blowup"
        failure_time = exc.time
        failure_note = str(exc)
        fields = state["last_fields"]
        t_end = exc.time
    wall = _time.perf_counter() - start

    totals = _aggregate(integrator.records)
    summary = {
        "status": status,
        "case": cfg.case,
        "formulation": cfg.formulation,
        "flux": cfg.flux,
        "p": cfg.p,
        "m": cfg.m,
        "n": cfg.n,
        "dt": dt,
        "t_final": t_final,
        "t_end": t_end,
        "failure_time": math.nan if failure_time is None else failure_time,
        "failure_note": failure_note,
        "steps": state["steps"],
        "wall_seconds": round(wall, 3),
        "admissible_fraction": admissible_fraction(disc, fields),
        **{k: (round(v, 3) if isinstance(v, float) else v)
           for k, v in totals.items()},
    }

    result = RunResult(
        status=status,
        t_end=t_end,
        failure_time=failure_time,
        steps=state["steps"],
        monitors=monitors,
        telemetry=list(integrator.records),
        summary=summary,
        fields=fields,
        disc=disc,
    )
    if directory is not None:
        _write_csv(directory / "monitors.csv", MONITOR_COLUMNS, monitors)
        _write_csv(directory / "telemetry.csv", TELEMETRY_COLUMNS,
                   integrator.records)
        write_summary(directory / "summary.txt", summary)
        if cfg.snapshot_every:
            write_snapshot(disc, fields, directory / "snapshot_final.vtk")
    return result


# ---------------------------------------------------------------------------
# convergence studies
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvergenceRow:
    level: int
    resolution: float     # mesh spacing h, or the time step
    error: float
    rate: float = None


@dataclass(frozen=True)
class ConvergenceReport:
    axis: str
    rows: tuple

    def rates(self):
        return [row.rate for row in self.rows if row.rate is not None]

    def errors(self):
        return [row.error for row in self.rows]


def _integrate_to(cfg, t_end, dt):
    case, disc = build_discretization(cfg)
    fields = disc.project(case.initial)
    integrator = DIRKIntegrator(disc, params=cfg.newton)
    fields, _ = integrator.run(fields, t_end, dt)
    return case, disc, fields


def convergence_study(cfg, axis, levels):
    """Vortex refinement study along one axis.

    Space: meshes n, 2n, 4n, ... at fixed polynomial degree, each run to
    10% of the convective period, with the time step shrunk by
    2^((p+1)/3) per level so the temporal error keeps pace with the
    spatial one.  Time: fixed mesh, time steps T/4, T/8, ... T/(4*2^k).
    Errors are L2 norms of the density against the exact translated
    vortex; rates are log2 of successive error ratios.
    """
    if axis not in ("space", "time"):
        raise InvalidConfig(f"axis must be space or time, got {axis!r}")
    if cfg.case == "tgv":
        raise InvalidConfig("convergence studies need the exact vortex "
                            "solution")
    if levels < 1:
        raise InvalidConfig("levels must be >= 1")
    case = build_case(cfg)
    t_c = convective_time(case)

    rows = []
    if axis == "space":
        t_eval = 0.1 * t_c
        if cfg.dt is not None or cfg.dt_over_tc is not None:
            dt0 = cfg.dt if cfg.dt is not None else cfg.dt_over_tc * t_c
        else:
            dt0 = t_eval / 10.0
        shrink = 2.0 ** ((cfg.p + 1) / 3.0)
        for level in range(levels):
            n = cfg.n * 2**level
            dt = dt0 / shrink**level
            run_cfg = _with(cfg, n=n)
            exact = _with_time(case, t_eval)
            _, disc, fields = _integrate_to(run_cfg, t_eval, dt)
            err = disc.l2_error(fields, exact, component=0)
            h = (case.box[0, 1] - case.box[0, 0]) / (n * cfg.m)
            rows.append((level, h, err))
    else:
        _, t_final = resolve_times(cfg, case)
        exact = _with_time(case, t_final)
        for level in range(levels):
            steps = 4 * 2**level
            dt = t_final / steps
            _, disc, fields = _integrate_to(cfg, t_final, dt)
            err = disc.l2_error(fields, exact, component=0)
            rows.append((level, dt, err))

    report_rows = []
    prev_err = None
    for level, res, err in rows:
        rate = None if prev_err is None else math.log2(prev_err / err)
        report_rows.append(ConvergenceRow(level, res, err, rate))
        prev_err = err
    return ConvergenceReport(axis=axis, rows=tuple(report_rows))


def _with(cfg, **overrides):
    kwargs = {f.name: getattr(cfg, f.name) for f in dc_fields(CaseConfig)}
    kwargs.update(overrides)
    return CaseConfig(**kwargs)


def _with_time(case, t):
    return lambda x: case.state(x, t)


# ---------------------------------------------------------------------------
# reference data
# ---------------------------------------------------------------------------

def dns_reference():
    """Bundled Re=1600 Taylor-Green dissipation-rate reference.

    Returns (t_star, eps_star) arrays: convective time and kinetic energy
    dissipation rate normalized by rho0 V0^2 / t_c, digitized from the
    published spectral DNS curve.  Loose qualitative envelope only.
    """
    from importlib import resources

    path = resources.files("macrohdg.data") / \
        "tgv_re1600_dissipation_dns.csv"
    numeric = [line for line in path.read_text().splitlines()
               if line and line[0].isdigit()]
    rows = np.loadtxt(numeric, delimiter=",")
    return rows[:, 0], rows[:, 1]


# ---------------------------------------------------------------------------
# degrees-of-freedom accounting
# ---------------------------------------------------------------------------

def dof_report(cfg):
    """Exact unknown counts for the configured discretization.

    Local unknowns count the per-macro-element fields eliminated by
    static condensation (state plus its d gradient components at every
    macro node); global unknowns count the trace coefficients, the only
    globally coupled system.  The effective resolution per direction is
    n*(m*p + 1) solution nodes.
    """
    case = build_case(cfg)
    mesh = build_box_macro_mesh(case.box, n_per_dim=cfg.n, m=cfg.m,
                                periodic=cfg.periodic)
    layout = dof_counts(mesh, cfg.p)
    return {
        "case": cfg.case,
        "dim": mesh.dim,
        "p": cfg.p,
        "m": cfg.m,
        "n_per_dim": cfg.n,
        "n_macros": layout.n_macros,
        "n_sub_elements": layout.n_elements,
        "n_skeleton_faces": layout.n_skeleton_faces,
        "nodes_per_macro": layout.nodes_per_macro,
        "trace_nodes_per_face": layout.trace_nodes_per_face,
        "local_dofs": layout.local_dofs,
        "global_dofs": layout.global_dofs,
        "n_eff_1d": layout.effective_1d[0],
        "n_eff": int(np.prod(layout.effective_1d)),
    }
