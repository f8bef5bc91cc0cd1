"""Implicit Runge-Kutta time march with a damped Newton stage solver.

A diagonally implicit tableau is applied to the condensed system: each stage
solves a steady problem whose temporal term is built from the inverse of the
tableau's ``a`` matrix, so stage values (not stage derivatives) are the
unknowns.  The step update then combines stage values directly,

    u^{n+1} = (1 - sum_j e_j) u^n + sum_j e_j u^{n,j},   e = b^T a^{-1},

which is algebraically identical to the classical b-weighted update.  For a
stiffly accurate tableau e picks out the last stage.

Each stage runs Newton with pseudo-transient continuation: the Jacobian (and
only the Jacobian) carries an extra 1/tau on its temporal diagonal, and tau
grows by successive evolution of the residual norm until it saturates.
"""

from __future__ import annotations

import logging
import math
import time as _time
from dataclasses import dataclass, field

import numpy as np

from .assembly import FieldSet, StageContext
from .errors import InvalidConfig, NewtonDivergence, NonAdmissibleState, StepFailure
from .solver import solve_condensed

log = logging.getLogger(__name__)


# ----------------------------------------------------------------------
# tableau
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class DirkTableau:
    """Butcher arrays plus the inverse-based stage weights.

    d is the inverse of a; e = b^T d gives the stage-value combination
    weights for the step update.
    """

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray
    e: np.ndarray

    @property
    def stages(self):
        return self.b.size


def make_tableau(a, b, c):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    c = np.asarray(c, dtype=float)
    if a.shape != (b.size, b.size) or c.shape != b.shape:
        raise InvalidConfig("inconsistent tableau shapes")
    if np.any(np.diag(a) <= 0.0):
        raise InvalidConfig("stage matrix must have positive diagonal")
    d = np.linalg.inv(a)
    e = b @ d
    return DirkTableau(a=a, b=b, c=c, d=d, e=e)


def dirk33_tableau():
    """Three-stage, third-order, L-stable, stiffly accurate DIRK.

    The diagonal is the root of x^3 - 3x^2 + 3x/2 - 1/6 in (1/3, 1/2);
    only that root gives A-stability.  The last row of a equals b, so the
    step update reduces to the final stage.
    """
    roots = np.roots([1.0, -3.0, 1.5, -1.0 / 6.0])
    real = roots[np.abs(roots.imag) < 1e-12].real
    (alpha,) = real[(real > 1.0 / 3.0) & (real < 0.5)]
    c2 = (1.0 + alpha) / 2.0
    b1 = -1.5 * alpha**2 + 4.0 * alpha - 0.25
    b2 = 1.5 * alpha**2 - 5.0 * alpha + 1.25
    a = np.array([
        [alpha, 0.0, 0.0],
        [c2 - alpha, alpha, 0.0],
        [b1, b2, alpha],
    ])
    b = np.array([b1, b2, alpha])
    c = np.array([alpha, c2, 1.0])
    return make_tableau(a, b, c)


# ----------------------------------------------------------------------
# Newton configuration and telemetry
# ----------------------------------------------------------------------

SER_MODES = ("standard", "inverse")


@dataclass
class NewtonParams:
    """Stage solver knobs.

    ser_mode picks the pseudo-time update direction: "standard" grows tau
    when the residual shrinks (tau *= r_old/r_new); "inverse" applies the
    reciprocal ratio and is kept selectable for comparison runs.
    """

    abs_tol: float = 1e-9
    max_iters: int = 30
    tau_init: float = 1.0
    tau_max: float = 1e8
    linear_rel_tol: float = 1e-3
    ser_mode: str = "standard"
    restart: int = 60
    max_outer: int = 240
    inner_rtol: float = 0.1
    inner_iters: int = 20
    reuse_jacobian: bool = True
    rebuild_ratio: float = 0.5
    growth_window: int = 4

    def __post_init__(self):
        if self.abs_tol <= 0 or self.linear_rel_tol <= 0:
            raise InvalidConfig("tolerances must be positive")
        if not 0 < self.tau_init <= self.tau_max:
            raise InvalidConfig("need 0 < tau_init <= tau_max")
        if self.ser_mode not in SER_MODES:
            raise InvalidConfig(f"ser_mode must be one of {SER_MODES}")
        if self.max_iters < 1:
            raise InvalidConfig("max_iters must be at least 1")
        if self.ser_mode == "inverse":
            log.warning("ser_mode='inverse' shrinks pseudo-time on contraction; "
                        "selected for comparison, expect slow stage solves")


@dataclass
class StageReport:
    """Per-stage solve telemetry; one CSV row in the step log."""

    stage: int
    newton_iters: int = 0
    residual: float = math.nan
    residual_history: list = field(default_factory=list)
    tau_final: float = math.nan
    fgmres_iters: int = 0
    inner_iters_total: int = 0
    jacobian_builds: int = 0
    condense_seconds: float = 0.0
    matvec_seconds: float = 0.0
    precond_seconds: float = 0.0
    recovery_seconds: float = 0.0


class JacobianCache:
    """Most recent linearization, reused across iterations and stages.

    The cached operator freezes the state and the pseudo-time weight it was
    built with; the residual stays exact, so reuse only affects the
    contraction rate.  A rebuild is forced whenever contraction falls below
    the configured ratio.
    """

    def __init__(self):
        self.lin = None
        self.alpha = None

    def invalidate(self):
        self.lin = None


# ----------------------------------------------------------------------
# Newton stage solve
# ----------------------------------------------------------------------

def _apply_update(fields, d_w, d_trace, d_q):
    out = fields.copy()
    out.w += d_w
    out.trace += d_trace
    if d_q is not None:
        out.q += d_q
    return out


def newton_solve(disc, fields, stage, params=None, cache=None, stage_index=0):
    """Solve one implicit stage; returns (fields, StageReport).

    The initial iterate is the incoming field set (previous stage or step).
    The pseudo-transient weight 1/tau enters the Jacobian diagonal only, so
    the converged answer solves the unmodified stage equations.
    """
    params = params or NewtonParams()
    own_cache = cache is None
    if own_cache:
        cache = JacobianCache()
    rep = StageReport(stage=stage_index)

    fields = fields.copy()
    res = disc.residuals(fields, stage)
    r = res.norm()
    rep.residual_history.append(r)
    tau = params.tau_init
    best = r
    since_best = 0

    while r > params.abs_tol:
        if rep.newton_iters >= params.max_iters:
            raise NewtonDivergence(
                f"stage {stage_index}: no convergence in {params.max_iters} "
                f"iterations, residual {r:.3e}")
        if tau < 1e-12:
            raise NewtonDivergence(
                f"stage {stage_index}: pseudo-time collapsed, residual {r:.3e}")

        if cache.lin is None or not params.reuse_jacobian \
                or cache.alpha != stage.alpha:
            t0 = _time.perf_counter()
            cache.lin = disc.jacobian(fields, stage, ptc_weight=1.0 / tau)
            cache.alpha = stage.alpha
            rep.condense_seconds += _time.perf_counter() - t0
            rep.jacobian_builds += 1

        d_trace, stats = solve_condensed(
            cache.lin, res,
            rel_tol=params.linear_rel_tol, restart=params.restart,
            max_outer=params.max_outer, inner_rtol=params.inner_rtol,
            inner_iters=params.inner_iters)
        rep.fgmres_iters += stats.outer_iterations
        rep.inner_iters_total += stats.inner_iterations
        rep.matvec_seconds += stats.matvec_seconds
        rep.precond_seconds += stats.precond_seconds

        t0 = _time.perf_counter()
        d_w, d_q = cache.lin.recover(res, d_trace)
        rep.recovery_seconds += _time.perf_counter() - t0

        trial = _apply_update(fields, d_w, d_trace, d_q)
        try:
            trial_res = disc.residuals(trial, stage)
            new_r = trial_res.norm()
        except NonAdmissibleState:
            new_r = math.inf
        rep.newton_iters += 1

        if not math.isfinite(new_r) or new_r > 1e3 * max(r, params.abs_tol):
            # reject the update: strengthen the pseudo-time damping
            tau = tau / 4.0
            cache.invalidate()
            rep.residual_history.append(r)
            continue

        if params.ser_mode == "standard":
            ratio = r / new_r if new_r > 0 else math.inf
        else:
            ratio = new_r / r if r > 0 else math.inf
        tau = min(tau * ratio, params.tau_max)

        if not stats.converged or new_r > params.rebuild_ratio * r:
            cache.invalidate()

        fields, res, r = trial, trial_res, new_r
        rep.residual_history.append(r)

        if r < best:
            best = r
            since_best = 0
        else:
            since_best += 1
            if since_best >= params.growth_window and r > 2.0 * best:
                raise NewtonDivergence(
                    f"stage {stage_index}: residual grew from {best:.3e} to "
                    f"{r:.3e} over {since_best} iterations")

    rep.residual = r
    rep.tau_final = tau
    if own_cache:
        cache.invalidate()
    return fields, rep


# ----------------------------------------------------------------------
# one implicit step
# ----------------------------------------------------------------------

def advance_step(disc, fields, t, dt, tableau=None, params=None, cache=None):
    """Advance the fields by one step of size dt; returns (fields, reports).

    Stage i solves

        (d_ii/dt) u + [ sum_{j<i} (d_ij/dt)(u^{n,j} - u^n) - (d_ii/dt) u^n ]
            + spatial residual = 0

    with d the inverse of the tableau's a.  The step update combines stage
    values on conservative nodal coefficients, so both working-variable
    formulations march the same quantity.
    """
    tableau = tableau or dirk33_tableau()
    params = params or NewtonParams()
    d = tableau.d
    ns = tableau.stages

    u_n = disc.volume_quad_states(fields)
    stage_sols = []
    stage_quads = []
    reports = []
    guess = fields
    for i in range(ns):
        alpha = d[i, i] / dt
        offset = -alpha * u_n
        for j in range(i):
            offset = offset + (d[i, j] / dt) * (stage_quads[j] - u_n)
        stage = StageContext(alpha=alpha, offset=offset, dt=dt)
        try:
            sol, rep = newton_solve(disc, guess, stage, params, cache,
                                    stage_index=i)
        except (NewtonDivergence, NonAdmissibleState) as exc:
            raise StepFailure(
                f"stage {i} failed at t={t:.6g} (dt={dt:.3e}): {exc}",
                time=t,
                diagnostics={"stage": i, "dt": dt, "reports": reports},
            ) from exc
        stage_sols.append(sol)
        stage_quads.append(disc.volume_quad_states(sol))
        reports.append(rep)
        guess = sol

    e = tableau.e
    u_new = (1.0 - e.sum()) * disc.to_conservative(fields.w, where="step update")
    tr_new = (1.0 - e.sum()) * disc.to_conservative(fields.trace,
                                                    where="step update")
    for j in range(ns):
        u_new = u_new + e[j] * disc.to_conservative(stage_sols[j].w,
                                                    where="step update")
        tr_new = tr_new + e[j] * disc.to_conservative(stage_sols[j].trace,
                                                      where="step update")
    out = FieldSet(w=disc.from_conservative(u_new),
                   trace=disc.from_conservative(tr_new))
    if disc.viscosity is not None:
        out.q = disc.solve_gradient(out)
    return out, reports


# ----------------------------------------------------------------------
# time loop
# ----------------------------------------------------------------------

class DIRKIntegrator:
    """March a discretization in time with step rejection.

    A failed step is retried with the step size halved, at most
    `max_halvings` times, after which the StepFailure propagates.  The
    nominal dt is restored for the next step.  Per-stage telemetry rows are
    appended to `records`; `on_step(step, t, fields, reports)` runs after
    every accepted step.
    """

    def __init__(self, disc, tableau=None, params=None, max_halvings=3):
        self.disc = disc
        self.tableau = tableau or dirk33_tableau()
        self.params = params or NewtonParams()
        self.max_halvings = max_halvings
        self.cache = JacobianCache()
        self.records = []

    def run(self, fields, t_final, dt, t0=0.0, on_step=None):
        t = t0
        step = 0
        eps = 1e-12 * max(1.0, abs(t_final))
        while t < t_final - eps:
            dt_step = min(dt, t_final - t)
            halvings = 0
            while True:
                try:
                    fields, reports = advance_step(
                        self.disc, fields, t, dt_step,
                        self.tableau, self.params, self.cache)
                    break
                except StepFailure as exc:
                    self.cache.invalidate()
                    halvings += 1
                    if halvings > self.max_halvings:
                        raise StepFailure(
                            f"step {step} failed after {self.max_halvings} "
                            f"halvings at t={t:.6g}",
                            time=t, diagnostics=exc.diagnostics) from exc
                    dt_step /= 2.0
                    log.warning("step %d rejected at t=%.6g, retrying with "
                                "dt=%.3e", step, t, dt_step)
            t += dt_step
            step += 1
            for rep in reports:
                self.records.append({
                    "step": step,
                    "time": t,
                    "stage": rep.stage,
                    "newton_iters": rep.newton_iters,
                    "residual": rep.residual,
                    "fgmres_iters": rep.fgmres_iters,
                    "inner_iters_total": rep.inner_iters_total,
                    "jacobian_builds": rep.jacobian_builds,
                    "tau_final": rep.tau_final,
                    "condense_seconds": rep.condense_seconds,
                    "matvec_seconds": rep.matvec_seconds,
                    "recovery_seconds": rep.recovery_seconds,
                })
            if on_step is not None:
                on_step(step, t, fields, reports)
        return fields, t
