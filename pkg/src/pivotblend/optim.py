"""BFGS with Armijo backtracking.

Written in-house rather than taken from scipy because the estimators need
three things scipy's BFGS does not give directly: +inf objective values must
simply shrink the step (support constraints), the accepted objective values
must be recorded (descent checks), and the inverse-Hessian seed must be
settable (the MM surrogate has known diagonal curvature).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    n_iter: int
    status: str
    trace: list[float] = field(default_factory=list)

    @property
    def grad_norm(self) -> float:
        return float(np.max(np.abs(self.grad))) if self.grad.size else 0.0

    @property
    def converged(self) -> bool:
        return self.status in ("grad_tol", "obj_tol", "stalled", "degenerate")


def _finite(f) -> bool:
    return bool(np.isfinite(f))


def bfgs(
    fun_grad,
    x0,
    *,
    grad_tol: float = 1e-6,
    obj_tol: float = 1e-10,
    max_iter: int = 500,
    hess_inv_diag=None,
    c1: float = 1e-4,
    max_backtracks: int = 60,
) -> OptimResult:
    """Minimize ``fun_grad(x) -> (f, g)`` from ``x0``.

    Stops with status ``grad_tol`` when ``max|g| < grad_tol``, ``obj_tol``
    after two consecutive accepted steps with relative decrease below
    ``obj_tol``, ``stalled`` when no step along steepest descent decreases
    the objective (a nonsmooth or boundary minimum to working precision),
    or ``max_iter``.
    """
    x = np.array(x0, dtype=float)
    k = x.size
    f, g = fun_grad(x)
    if not _finite(f):
        return OptimResult(x, float("inf"), np.full(k, np.nan), 0, "infeasible_start", [])
    h0 = np.ones(k) if hess_inv_diag is None else np.asarray(hess_inv_diag, dtype=float)
    gmax = np.max(np.abs(g)) if k else 0.0
    H = np.diag(h0 / max(1.0, gmax * np.max(h0)))
    fresh = True
    trace = [float(f)]
    small_steps = 0
    status = "max_iter"
    it = 0
    for it in range(1, max_iter + 1):
        if k == 0 or np.max(np.abs(g)) < grad_tol:
            status = "grad_tol"
            it -= 1
            break
        d = -H @ g
        slope = float(g @ d)
        if not slope < 0:
            H = np.diag(h0)
            fresh = True
            d = -H @ g
            slope = float(g @ d)
        step = 1.0
        accepted = False
        for _ in range(max_backtracks):
            x_new = x + step * d
            f_new, g_new = fun_grad(x_new)
            if _finite(f_new) and f_new <= f + c1 * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            if not fresh:
                H = np.diag(h0 / max(1.0, np.max(np.abs(g)) * np.max(h0)))
                fresh = True
                continue
            status = "stalled"
            break
        s = x_new - x
        yv = g_new - g
        rel = (f - f_new) / max(abs(f), 1.0)
        x, f, g = x_new, f_new, g_new
        trace.append(float(f))
        sy = float(s @ yv)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(yv):
            if fresh:
                # Shanno-Phua rescaling of the seed before the first update
                H = H * (sy / float(yv @ H @ yv)) if float(yv @ H @ yv) > 0 else H
                fresh = False
            rho = 1.0 / sy
            Hy = H @ yv
            H = H + (rho * rho * float(yv @ Hy) + rho) * np.outer(s, s) - rho * (np.outer(Hy, s) + np.outer(s, Hy))
        if rel < obj_tol:
            small_steps += 1
            if small_steps >= 2:
                status = "obj_tol"
                break
        else:
            small_steps = 0
    return OptimResult(x, float(f), np.asarray(g, dtype=float), it, status, trace)
