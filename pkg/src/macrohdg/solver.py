"""Krylov solution of the condensed trace system.

One flexible GMRES routine serves both levels: the outer solve, whose
preconditioner is an inner GMRES sweep on the same operator, and that inner
sweep itself, preconditioned by the factored per-face trace blocks.  With a
constant preconditioner the flexible iteration reduces to right-preconditioned
GMRES, so nothing is lost by sharing the routine.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import KrylovStagnation

_TINY = 1e-300


@dataclass
class KrylovResult:
    x: np.ndarray
    iterations: int
    rel_residual: float
    converged: bool


@dataclass
class SolveStats:
    outer_iterations: int
    inner_iterations: int
    rel_residual: float
    converged: bool
    matvec_seconds: float
    precond_seconds: float


def fgmres(op, b, precond=None, rel_tol=1e-3, restart=60, max_iters=None,
           x0=None, raise_on_stagnation=True):
    """Flexible GMRES with restarts.

    op maps a flat vector to a flat vector; precond (optional) may change
    between iterations.  Returns a KrylovResult; if the relative residual
    fails to improve over a whole restart cycle, raises KrylovStagnation
    (or returns unconverged when raise_on_stagnation is false).
    """
    b = np.asarray(b, dtype=float)
    n = b.size
    if max_iters is None:
        max_iters = 10 * restart
    norm_b = float(np.linalg.norm(b))
    if norm_b == 0.0:
        return KrylovResult(np.zeros(n), 0, 0.0, True)
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).copy()

    total = 0
    prev_cycle_rel = math.inf
    while True:
        r = b - op(x) if x.any() else b.copy()
        beta = float(np.linalg.norm(r))
        rel = beta / norm_b
        if rel <= rel_tol:
            return KrylovResult(x, total, rel, True)
        if total >= max_iters:
            return KrylovResult(x, total, rel, False)
        if rel >= prev_cycle_rel * (1 - 1e-12):
            if raise_on_stagnation:
                raise KrylovStagnation(
                    f"no progress over a restart cycle, residual {rel:.3e}")
            return KrylovResult(x, total, rel, False)
        prev_cycle_rel = rel

        m = min(restart, max_iters - total)
        v_basis = np.empty((m + 1, n))
        z_basis = np.empty((m, n))
        hess = np.zeros((m + 1, m))
        cs = np.empty(m)
        sn = np.empty(m)
        g = np.zeros(m + 1)
        g[0] = beta
        v_basis[0] = r / beta
        k = 0
        for j in range(m):
            z = precond(v_basis[j]) if precond is not None else v_basis[j]
            w = op(z)
            z_basis[j] = z
            for i in range(j + 1):
                hess[i, j] = v_basis[i] @ w
                w -= hess[i, j] * v_basis[i]
            hnorm = float(np.linalg.norm(w))
            hess[j + 1, j] = hnorm
            if hnorm > _TINY:
                v_basis[j + 1] = w / hnorm
            for i in range(j):
                t = cs[i] * hess[i, j] + sn[i] * hess[i + 1, j]
                hess[i + 1, j] = -sn[i] * hess[i, j] + cs[i] * hess[i + 1, j]
                hess[i, j] = t
            denom = math.hypot(hess[j, j], hess[j + 1, j])
            if denom == 0.0:
                # Krylov space exhausted without progress on this column
                break
            cs[j] = hess[j, j] / denom
            sn[j] = hess[j + 1, j] / denom
            hess[j, j] = denom
            hess[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] *= cs[j]
            total += 1
            k = j + 1
            if abs(g[j + 1]) / norm_b <= rel_tol or hnorm <= _TINY:
                break
        if k > 0:
            y = solve_triangular(hess[:k, :k], g[:k], check_finite=False)
            x = x + z_basis[:k].T @ y


def solve_condensed(lin, res, rel_tol=1e-3, restart=60, max_outer=240,
                    inner_rtol=0.1, inner_iters=20, inner_precond=True):
    """Solve the condensed Newton system for the trace update.

    lin is a LinearizedSystem; res the ResidualSet at the same state.  The
    outer flexible iteration is preconditioned by an inner GMRES sweep on the
    same operator (itself preconditioned by the face-block solve), or by the
    face-block solve alone when inner_precond is false.  Returns
    (trace update, SolveStats); inspect stats.converged, nothing raises here.
    """
    shape = lin.trace_shape
    timers = {"matvec": 0.0, "precond": 0.0}

    def op(v):
        t0 = time.perf_counter()
        out = lin.matvec(v.reshape(shape)).ravel()
        timers["matvec"] += time.perf_counter() - t0
        return out

    def face_solve(v):
        t0 = time.perf_counter()
        out = lin.apply_preconditioner(v.reshape(shape)).ravel()
        timers["precond"] += time.perf_counter() - t0
        return out

    inner_count = [0]
    if inner_precond:
        def precond(v):
            result = fgmres(op, v, precond=face_solve, rel_tol=inner_rtol,
                            restart=inner_iters, max_iters=inner_iters,
                            raise_on_stagnation=False)
            inner_count[0] += result.iterations
            if not result.x.any():
                return face_solve(v)
            return result.x
    else:
        precond = face_solve

    b = lin.condensed_rhs(res).ravel()
    result = fgmres(op, b, precond=precond, rel_tol=rel_tol, restart=restart,
                    max_iters=max_outer, raise_on_stagnation=False)
    stats = SolveStats(
        outer_iterations=result.iterations,
        inner_iterations=inner_count[0],
        rel_residual=result.rel_residual,
        converged=result.converged,
        matvec_seconds=timers["matvec"],
        precond_seconds=timers["precond"],
    )
    return result.x.reshape(shape), stats
