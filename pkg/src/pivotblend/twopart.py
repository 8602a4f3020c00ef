"""Sparse skewed two-part (S^2) models for semicontinuous responses.

Zeros go to a logistic part fitted on every row; positives, after a
transform ``T``, go to a skewed pivot-blend regression. Joint selection comes
from a row-wise group penalty on ``B_k = (w_k beta_k, u_k b_k)``. By default
``w_k`` and ``u_k`` are the centered column norms of the positive-row and
all-row designs, which are close to ``sqrt(n)`` and ``sqrt(N)`` for
standardized predictors and make selection invariant to rescaling a column;
``scaling="sqrt_n"`` uses ``sqrt(n)`` and ``sqrt(N)`` literally.

The nonsmooth penalty is handled by majorize-minimize: at weights ``a_k``,
``||B_k|| <= (||B_k||^2 / a_k + a_k) / 2``, and each outer pass minimizes the
smooth surrogate block-wise (continuous part by BFGS, binary part by Newton)
before refreshing ``a_k = max(||B_k||, floor)``.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.special import expit

from ._rng import make_rng
from .densities import BaseDensity, HuberPseudo, SkewSpec
from .errors import ConfigError, DomainError, InternalError, PartitionError, StratificationError
from .optim import bfgs
from .speus import FitOptions, SPFit, SpeusProblem, speus_core, speus_fit

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# transforms

@dataclass(frozen=True)
class Transform:
    """Map applied to the positive responses: ``log``, ``identity`` or Box-Cox ``power``."""

    kind: str = "log"
    lam: float = 0.5

    def __post_init__(self):
        if self.kind not in ("log", "identity", "power"):
            raise ConfigError(f"unknown transform {self.kind!r}; use log, identity or power")
        if self.kind == "power" and self.lam == 0:
            raise ConfigError("power transform with lambda 0 is the log transform")

    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        if self.kind == "log":
            return np.log(y)
        if self.kind == "identity":
            return y.copy()
        return (y ** self.lam - 1.0) / self.lam

    @classmethod
    def parse(cls, spec) -> "Transform":
        if isinstance(spec, Transform):
            return spec
        text = str(spec).strip().lower()
        if text.startswith("power"):
            _, _, lam = text.partition(":")
            return cls("power", float(lam) if lam else 0.5)
        return cls(text)

    def to_dict(self):
        return {"kind": self.kind, "lam": self.lam} if self.kind == "power" else {"kind": self.kind}


# ---------------------------------------------------------------------------
# problem

@dataclass
class TwoPartProblem:
    X: np.ndarray
    y: np.ndarray
    transform: Transform | str = "log"
    base: BaseDensity = field(default_factory=HuberPseudo)
    tau: float | None = None
    lam: float = 0.0
    scaling: str = "column"
    ridge_beta: float = 0.0

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = np.asarray(self.y, dtype=float).ravel()
        if self.X.shape[0] != self.y.size:
            raise DomainError(f"X has {self.X.shape[0]} rows but y has {self.y.size} entries")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise DomainError("X and y must be finite")
        if np.any(self.y < 0):
            raise DomainError("semicontinuous responses must be nonnegative")
        self.transform = Transform.parse(self.transform)
        zero = self.y == 0
        if not zero.any():
            raise PartitionError("no zero responses: the binary part is empty; fit the continuous part alone")
        if zero.all():
            raise PartitionError("no positive responses: the continuous part is empty; fit the logistic part alone")
        tiny = (self.y > 0) & (self.y < 1e-12)
        if tiny.any():
            warnings.warn(f"{int(tiny.sum())} positive responses below 1e-12; check for rounding to zero", stacklevel=2)
        self.pos = np.flatnonzero(~zero)
        self.zind = zero.astype(float)
        self.Xc = self.X[self.pos]
        self.yt = self.transform(self.y[self.pos])
        if not np.all(np.isfinite(self.yt)):
            raise DomainError("transformed positive responses are not finite")
        if self.tau is None:
            self.tau = 1e-4 * self.n
        if self.tau < 0 or self.lam < 0 or self.ridge_beta < 0:
            raise ConfigError("tau, lam and ridge_beta must be nonnegative")
        self.w, self.u = self._penalty_weights()

    def _penalty_weights(self):
        n, N = self.n, self.N
        if self.scaling == "sqrt_n":
            return np.full(self.p, math.sqrt(n)), np.full(self.p, math.sqrt(N))
        if self.scaling != "column":
            raise ConfigError(f"unknown penalty scaling {self.scaling!r}; use column or sqrt_n")
        w = np.linalg.norm(self.Xc - self.Xc.mean(axis=0), axis=0)
        u = np.linalg.norm(self.X - self.X.mean(axis=0), axis=0)
        if np.any(w <= 0) or np.any(u <= 0):
            raise DomainError("a predictor is constant (on all rows or on the positive rows)")
        return w, u

    @property
    def n(self):
        return self.pos.size

    @property
    def N(self):
        return self.y.size

    @property
    def p(self):
        return self.X.shape[1]

    def subset(self, rows, cols=None) -> "TwoPartProblem":
        X = self.X[rows] if cols is None else self.X[np.ix_(rows, cols)]
        return TwoPartProblem(X, self.y[rows], self.transform, self.base, self.tau, self.lam, self.scaling, self.ridge_beta)


@dataclass(frozen=True)
class TwoPartOptions:
    max_outer: int = 200
    outer_tol: float = 1e-8
    inner_max_iter: int = 15
    grad_tol: float = 1e-6
    a_floor: float = 1e-8
    support_tol: float = 1e-6
    descent_slack: float = 1e-10
    speus: FitOptions = field(default_factory=FitOptions)

    @classmethod
    def from_mapping(cls, data: dict) -> "TwoPartOptions":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown two-part options: {sorted(unknown)}")
        data = dict(data)
        if isinstance(data.get("speus"), dict):
            data["speus"] = FitOptions.from_mapping(data["speus"])
        return cls(**data)


@dataclass
class TwoPartFit:
    b: np.ndarray
    b0: float
    beta: np.ndarray
    alpha: float
    skew: SkewSpec
    support: list
    lambda_used: float
    objective: float
    objective_trace: list = field(default_factory=list)
    n_outer: int = 0
    n_inner: int = 0
    converged: bool = True

    @property
    def state(self):
        return dict(b=self.b, b0=self.b0, beta=self.beta, alpha=self.alpha,
                    s=math.log(self.skew.sigma), t=math.log(self.skew.nu), m=self.skew.m)

    def to_dict(self) -> dict:
        return {
            "b": [float(v) for v in self.b],
            "b0": float(self.b0),
            "beta": [float(v) for v in self.beta],
            "alpha": float(self.alpha),
            "skew": self.skew.to_dict(),
            "support": [int(k) for k in self.support],
            "lambda_used": float(self.lambda_used),
            "objective": float(self.objective),
            "objective_trace": [float(v) for v in self.objective_trace],
            "n_outer": int(self.n_outer),
            "converged": bool(self.converged),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TwoPartFit":
        return cls(
            b=np.asarray(d["b"], float), b0=float(d["b0"]), beta=np.asarray(d["beta"], float),
            alpha=float(d["alpha"]), skew=SkewSpec(**d["skew"]), support=list(d["support"]),
            lambda_used=float(d["lambda_used"]), objective=float(d["objective"]),
            objective_trace=list(d.get("objective_trace", [])), n_outer=int(d.get("n_outer", 0)),
            converged=bool(d.get("converged", True)),
        )


# ---------------------------------------------------------------------------
# objective pieces

def logistic_nll(Z, zind, b, b0):
    """``sum[-eta 1{y=0} + log(1 + e^eta)]`` with ``eta = Z b + b0``, and its gradient."""
    eta = Z @ b + b0
    f = float(np.sum(np.logaddexp(0.0, eta) - eta * zind))
    resid = expit(eta) - zind
    return f, Z.T @ resid, float(np.sum(resid))


def group_norms(prob: TwoPartProblem, beta, b):
    return np.hypot(prob.w * np.asarray(beta, float), prob.u * np.asarray(b, float))


def _cont(prob, beta, alpha, s, t, m, need_grad=True):
    f, g = speus_core(prob.Xc, prob.yt, prob.base, np.asarray(beta, float), float(alpha), s, t, m,
                      prob.tau, prob.tau, need_grad=need_grad)
    if prob.ridge_beta and math.isfinite(f):
        f += 0.5 * prob.ridge_beta * float(np.dot(beta, beta))
        if g is not None:
            g[:prob.p] += prob.ridge_beta * np.asarray(beta, float)
    return f, g


def s2_objective(prob: TwoPartProblem, b, beta, s, t, m, *, b0=0.0, alpha=0.0, lam=None) -> float:
    """The full S^2 criterion (continuous + logistic + group penalty + ridge terms)."""
    lam = prob.lam if lam is None else lam
    fc, _ = _cont(prob, beta, alpha, s, t, m, need_grad=False)
    fb, _, _ = logistic_nll(prob.X, prob.zind, np.asarray(b, float), float(b0))
    return fc + fb + lam * float(np.sum(group_norms(prob, beta, b)))


def s2_gradient(prob: TwoPartProblem, b, beta, s, t, m, *, b0=0.0, alpha=0.0, lam=None) -> np.ndarray:
    """Gradient in the order ``(b..., b0, beta..., alpha, s, t, m)``.

    Valid where every group norm is positive (the penalty is smooth there).
    """
    lam = prob.lam if lam is None else lam
    beta = np.asarray(beta, float)
    b = np.asarray(b, float)
    _, gc = _cont(prob, beta, alpha, s, t, m)
    _, gb, gb0 = logistic_nll(prob.X, prob.zind, b, float(b0))
    norms = group_norms(prob, beta, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        gb = gb + lam * prob.u ** 2 * b / norms
        gc = gc.copy()
        gc[:prob.p] += lam * prob.w ** 2 * beta / norms
    return np.concatenate([gb, [gb0], gc])


# ---------------------------------------------------------------------------
# block solvers

def _logistic_newton(Z, zind, b, b0, curv, max_iter=50, tol=1e-10):
    """Minimize ``logistic_nll + sum curv_k b_k^2 / 2`` by damped Newton."""
    N, p = Z.shape
    A = np.column_stack([Z, np.ones(N)])
    x = np.concatenate([b, [b0]])
    pen = np.concatenate([curv, [0.0]])

    def fg(x):
        f, g, g0 = logistic_nll(Z, zind, x[:p], x[p])
        return f + 0.5 * float(np.sum(pen * x * x)), np.concatenate([g, [g0]]) + pen * x

    f, g = fg(x)
    for _ in range(max_iter):
        pi = expit(A @ x)
        H = (A * (pi * (1 - pi))[:, None]).T @ A + np.diag(pen)
        H[np.diag_indices_from(H)] += 1e-12
        try:
            d = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            d = -g
        step = 1.0
        while step > 1e-12:
            f_new, g_new = fg(x + step * d)
            if f_new <= f + 1e-4 * step * float(g @ d):
                break
            step *= 0.5
        else:
            break
        x, dec, f, g = x + step * d, f - f_new, f_new, g_new
        if dec <= tol * max(1.0, abs(f)):
            break
    return x[:p], float(x[p])


def _null_state(prob: TwoPartProblem, opts: TwoPartOptions):
    """Intercept-only fits of both parts."""
    sp = SpeusProblem(np.zeros((prob.n, 0)), prob.yt, prob.base, tau_scale=prob.tau, tau_pivot=prob.tau)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit = speus_fit(sp, opts.speus)
    frac = float(np.clip(prob.zind.mean(), 1e-12, 1 - 1e-12))
    return dict(b=np.zeros(prob.p), b0=math.log(frac / (1 - frac)), beta=np.zeros(prob.p), alpha=fit.alpha,
                s=math.log(fit.skew.sigma), t=math.log(fit.skew.nu), m=fit.skew.m)


def _full_state(prob: TwoPartProblem, opts: TwoPartOptions):
    """Unpenalized fits of both parts (the lambda = 0 solution)."""
    sp = SpeusProblem(prob.Xc, prob.yt, prob.base, tau_scale=prob.tau, tau_pivot=prob.tau)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit = speus_fit(sp, opts.speus)
    b, b0 = _logistic_newton(prob.X, prob.zind, np.zeros(prob.p), 0.0, np.zeros(prob.p))
    return dict(b=b, b0=b0, beta=fit.beta.copy(), alpha=fit.alpha,
                s=math.log(fit.skew.sigma), t=math.log(fit.skew.nu), m=fit.skew.m)


def _unpenalized_gradient(prob, st):
    """Scaled row gradients ``(g_beta_k / w_k, g_b_k / u_k)`` of the smooth loss."""
    _, gc = _cont(prob, st["beta"], st["alpha"], st["s"], st["t"], st["m"])
    _, gb, _ = logistic_nll(prob.X, prob.zind, st["b"], st["b0"])
    return np.hypot(gc[:prob.p] / prob.w, gb / prob.u)


def lambda_max(prob: TwoPartProblem, opts: TwoPartOptions | None = None, null_state=None) -> float:
    """Smallest penalty level at which the null model satisfies the KKT conditions."""
    opts = opts or TwoPartOptions()
    st = null_state or _null_state(prob, opts)
    return float(np.max(_unpenalized_gradient(prob, st))) if prob.p else 0.0


def _state_objective(prob, st, lam):
    return s2_objective(prob, st["b"], st["beta"], st["s"], st["t"], st["m"], b0=st["b0"], alpha=st["alpha"], lam=lam)


def _initial_weights(prob, st, lam, opts):
    """MM weights at the start. Rows at zero that violate the KKT bound get a
    nonzero weight so they can enter; a floor weight would pin them at zero."""
    norms = group_norms(prob, st["beta"], st["b"])
    a = np.maximum(norms, opts.a_floor)
    dead = norms <= 100 * opts.a_floor
    if lam > 0 and dead.any():
        viol = dead & (_unpenalized_gradient(prob, st) > lam)
        live = norms[~dead]
        a[viol] = max(float(np.mean(live)) if live.size else 0.0, 1.0)
    return a


def _continuous_block(prob, st, curv, opts):
    """A few BFGS steps on the continuous surrogate (inexact MM: any decrease suffices)."""
    p, n = prob.p, prob.n
    sig_nu = math.exp(st["s"] + st["t"])
    data_curv = np.sum(prob.Xc ** 2, axis=0) / sig_nu
    hdiag = np.concatenate([1.0 / (data_curv + curv + prob.ridge_beta), [sig_nu / n, 1.0 / n, 1.0 / n, 1.0 / n]])

    def fg(v):
        beta = v[:p]
        f, g = _cont(prob, beta, v[p], v[p + 1], v[p + 2], v[p + 3])
        if g is None:
            return math.inf, None
        g = g.copy()
        g[:p] += curv * beta
        return f + 0.5 * float(np.sum(curv * beta * beta)), g

    x0 = np.concatenate([st["beta"], [st["alpha"], st["s"], st["t"], st["m"]]])
    res = bfgs(fg, x0, grad_tol=opts.grad_tol, obj_tol=1e-12, max_iter=opts.inner_max_iter, hess_inv_diag=hdiag)
    if not math.isfinite(res.fun):
        return st, 0
    v = res.x
    st = dict(st, beta=v[:p].copy(), alpha=float(v[p]), s=float(v[p + 1]), t=float(v[p + 2]), m=float(v[p + 3]))
    return st, res.n_iter


def _mm(prob, st, lam, opts, a=None):
    """Majorize-minimize outer loop from state ``st``."""
    a = _initial_weights(prob, st, lam, opts) if a is None else a
    F = _state_objective(prob, st, lam)
    trace = [F]
    n_inner = 0
    converged = False
    it = 0
    for it in range(1, opts.max_outer + 1):
        norms = group_norms(prob, st["beta"], st["b"])
        gap = lam * float(np.sum(0.5 * (norms ** 2 / a + a) - norms))
        st, k = _continuous_block(prob, st, lam * prob.w ** 2 / a, opts)
        n_inner += k
        b, b0 = _logistic_newton(prob.X, prob.zind, st["b"], st["b0"], lam * prob.u ** 2 / a)
        st = dict(st, b=b, b0=b0)
        a = np.maximum(group_norms(prob, st["beta"], st["b"]), opts.a_floor)
        F_new = _state_objective(prob, st, lam)
        if F_new > F + gap + opts.descent_slack * max(1.0, abs(F)):
            raise InternalError(f"MM step increased the objective from {F!r} to {F_new!r} (surrogate gap {gap:.3g})")
        trace.append(F_new)
        done = abs(F - F_new) < opts.outer_tol * max(1.0, abs(F_new))
        F = F_new
        if done and it > 1:
            converged = True
            break
    if lam > 0:
        st, F_pruned = _kkt_prune(prob, st, lam, F, opts)
        if F_pruned != F:
            trace.append(F_pruned)
    return st, trace, it, n_inner, converged


def _kkt_prune(prob, st, lam, F, opts):
    """Zero the rows that satisfy the zero-row optimality condition.

    MM shrinks such rows only geometrically, so at the stopping point they
    can still be far above any sensible threshold. A row ``k`` is optimal at
    zero when the scaled gradient of the smooth loss there has norm below
    ``lam``; to first order zeroing it then lowers the objective by
    ``(lam - ||g_k||) ||B_k||``. The change is kept only if it does not raise
    the objective.
    """
    live = group_norms(prob, st["beta"], st["b"]) > 0
    drop = np.zeros(prob.p, dtype=bool)
    for _ in range(prob.p):
        beta = np.where(drop, 0.0, st["beta"])
        b = np.where(drop, 0.0, st["b"])
        cand = np.zeros(prob.p, dtype=bool)
        for k in np.flatnonzero(live & ~drop):
            bk, ck = beta[k], b[k]
            beta[k] = b[k] = 0.0
            _, gc = _cont(prob, beta, st["alpha"], st["s"], st["t"], st["m"])
            _, gb, _ = logistic_nll(prob.X, prob.zind, b, st["b0"])
            beta[k], b[k] = bk, ck
            cand[k] = math.hypot(gc[k] / prob.w[k], gb[k] / prob.u[k]) < lam
        if not cand.any():
            break
        drop |= cand
    if not drop.any():
        return st, F
    trial = dict(st, beta=np.where(drop, 0.0, st["beta"]), b=np.where(drop, 0.0, st["b"]))
    F_new = _state_objective(prob, trial, lam)
    if F_new <= F + opts.descent_slack * max(1.0, abs(F)):
        return trial, F_new
    return st, F


def _package(prob, st, lam, trace, n_outer, n_inner, converged, opts) -> TwoPartFit:
    norms = group_norms(prob, st["beta"], st["b"])
    top = float(np.max(norms)) if norms.size else 0.0
    keep = norms > max(opts.support_tol * top, 100 * opts.a_floor)
    beta = np.where(keep, st["beta"], 0.0)
    b = np.where(keep, st["b"], 0.0)
    obj = s2_objective(prob, b, beta, st["s"], st["t"], st["m"], b0=st["b0"], alpha=st["alpha"], lam=lam)
    return TwoPartFit(
        b=b, b0=float(st["b0"]), beta=beta, alpha=float(st["alpha"]),
        skew=SkewSpec(float(st["m"]), math.exp(st["s"]), math.exp(st["t"])),
        support=[int(k) for k in np.flatnonzero(keep)], lambda_used=float(lam), objective=obj,
        objective_trace=trace, n_outer=n_outer, n_inner=n_inner, converged=converged,
    )


def s2_fit(prob: TwoPartProblem, lam: float | None = None, opts: TwoPartOptions | None = None,
           init: TwoPartFit | dict | None = None) -> TwoPartFit:
    """Fit the S^2 criterion at one penalty level.

    Without ``init`` the fit starts from the unpenalized (lambda = 0)
    solution, itself found by the multi-start SPEUS fit and a logistic Newton
    fit, so ``lam = 0`` reproduces the separate fits. A cold fit at or above
    ``lambda_max`` returns the intercept-only model directly.
    """
    opts = opts or TwoPartOptions()
    lam = prob.lam if lam is None else float(lam)
    if lam < 0:
        raise ConfigError("lambda must be nonnegative")
    if init is None:
        if lam > 0:
            # at or above lambda_max the null model meets the optimality conditions
            null = _null_state(prob, opts)
            if lam >= lambda_max(prob, opts, null):
                F = _state_objective(prob, null, lam)
                return _package(prob, null, lam, [F], 0, 0, True, opts)
        st = _full_state(prob, opts)
    else:
        st = dict(init.state) if isinstance(init, TwoPartFit) else dict(init)
        st["beta"] = np.array(st["beta"], float)
        st["b"] = np.array(st["b"], float)
    st, trace, n_outer, n_inner, converged = _mm(prob, st, lam, opts)
    if not converged:
        warnings.warn(f"S2 fit at lambda={lam:.4g} stopped after {n_outer} outer iterations", stacklevel=2)
    return _package(prob, st, lam, trace, n_outer, n_inner, converged, opts)


def lambda_grid(lmax: float, n_lambda: int, ratio: float = 1e-3) -> np.ndarray:
    if n_lambda < 2:
        raise ConfigError("a path needs at least two penalty levels")
    return lmax * np.logspace(0.0, math.log10(ratio), n_lambda)


def s2_path(prob: TwoPartProblem, n_lambda: int = 20, opts: TwoPartOptions | None = None,
            lambdas=None, warm: bool = True) -> list[TwoPartFit]:
    """Fits along a decreasing log-spaced grid from ``lambda_max``.

    With ``warm`` each fit starts from the previous one; otherwise every fit
    starts from the null model.
    """
    opts = opts or TwoPartOptions()
    null = _null_state(prob, opts)
    if lambdas is None:
        lambdas = lambda_grid(lambda_max(prob, opts, null), n_lambda)
    fits = []
    st = null
    for lam in lambdas:
        start = st if warm else null
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fit = s2_fit(prob, float(lam), opts, init=start)
        if fits and not set(fits[-1].support) <= set(fit.support):
            log.info("support shrank along the path at lambda=%.4g: %s -> %s", lam, fits[-1].support, fit.support)
        fits.append(fit)
        st = fit.state
    return fits


# ---------------------------------------------------------------------------
# selective cross-validation

def stratified_folds(zind, folds: int, seed=0) -> np.ndarray:
    """Fold label per row; zeros and positives are dealt out separately."""
    if folds < 2:
        raise ConfigError("need at least two folds")
    rng = make_rng(seed)
    labels = np.empty(zind.size, dtype=int)
    for grp in (np.flatnonzero(zind == 1), np.flatnonzero(zind == 0)):
        if grp.size < folds:
            raise StratificationError(f"only {grp.size} {'zero' if zind[grp[0]] == 1 else 'positive'} rows for {folds} folds"
                                      if grp.size else "a response class is empty")
        perm = rng.permutation(grp)
        labels[perm] = np.arange(perm.size) % folds
    return labels


def validation_nll(prob: TwoPartProblem, fit: TwoPartFit, rows) -> float:
    """Negative log-likelihood of held-out ``rows`` (on the transformed scale), no penalties."""
    rows = np.asarray(rows)
    X, y = prob.X[rows], prob.y[rows]
    zind = (y == 0).astype(float)
    fb, _, _ = logistic_nll(X, zind, fit.b, fit.b0)
    pos = y > 0
    if not pos.any():
        return fb
    fc, _ = speus_core(X[pos], prob.transform(y[pos]), prob.base, fit.beta, fit.alpha,
                       math.log(fit.skew.sigma), math.log(fit.skew.nu), fit.skew.m, 0.0, 0.0, need_grad=False)
    return fb + fc


def refit_on_support(prob: TwoPartProblem, support, opts: TwoPartOptions, warm: TwoPartFit | None = None) -> TwoPartFit:
    """Unpenalized refit restricted to ``support``, embedded back into p columns."""
    support = np.asarray(sorted(support), dtype=int)
    p = prob.p
    Xs, Xcs = prob.X[:, support], prob.Xc[:, support]
    sp = SpeusProblem(Xcs if support.size else np.zeros((prob.n, 0)), prob.yt, prob.base,
                      include_intercept=True, tau_scale=prob.tau, tau_pivot=prob.tau)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if warm is not None:
            init = SPFit(beta=warm.beta[support], alpha=warm.alpha, skew=warm.skew, neg_loglik=0.0,
                         objective=0.0, converged=True, n_iter=0, grad_norm=0.0, init_used="warm")
            sfit = speus_fit(sp, opts.speus, init=init)
        else:
            sfit = speus_fit(sp, opts.speus)
    b, b0 = _logistic_newton(Xs, prob.zind, np.zeros(support.size), 0.0, np.zeros(support.size))
    beta_full, b_full = np.zeros(p), np.zeros(p)
    beta_full[support] = sfit.beta
    b_full[support] = b
    st = dict(b=b_full, b0=b0, beta=beta_full, alpha=sfit.alpha, s=math.log(sfit.skew.sigma),
              t=math.log(sfit.skew.nu), m=sfit.skew.m)
    obj = _state_objective(prob, st, 0.0)
    return TwoPartFit(b=b_full, b0=b0, beta=beta_full, alpha=sfit.alpha, skew=sfit.skew,
                      support=[int(k) for k in support], lambda_used=0.0, objective=obj,
                      converged=sfit.converged)


@dataclass
class SCVResult:
    lambdas: np.ndarray
    cv_table: np.ndarray          # folds x n_lambda validation losses
    mean: np.ndarray
    se: np.ndarray
    lambda_star: float
    lambda_1se: float
    fit: TwoPartFit
    path: list

    def to_dict(self):
        return {
            "lambdas": self.lambdas.tolist(),
            "cv_table": self.cv_table.tolist(),
            "mean": self.mean.tolist(),
            "se": self.se.tolist(),
            "lambda_star": self.lambda_star,
            "lambda_1se": self.lambda_1se,
            "support": self.fit.support,
        }


def select_lambda_scv(prob: TwoPartProblem, folds: int = 5, opts: TwoPartOptions | None = None,
                      n_lambda: int = 20, seed=0, lambdas=None) -> SCVResult:
    """Selective cross-validation over a penalty path.

    For each fold and each path level the support of the training-fold path
    fit is refitted without penalty and scored by held-out negative
    log-likelihood. The grid comes from the full-data ``lambda_max`` so the
    folds share it. The final fit is the full-data path fit at ``lambda*``.
    """
    opts = opts or TwoPartOptions()
    labels = stratified_folds(prob.zind, folds, seed)
    null = _null_state(prob, opts)
    if lambdas is None:
        lambdas = lambda_grid(lambda_max(prob, opts, null), n_lambda)
    lambdas = np.asarray(lambdas, dtype=float)
    table = np.empty((folds, lambdas.size))
    for k in range(folds):
        train = np.flatnonzero(labels != k)
        valid = np.flatnonzero(labels == k)
        sub = prob.subset(train)
        path = s2_path(sub, opts=opts, lambdas=lambdas)
        cache = {}
        for j, fit in enumerate(path):
            key = tuple(fit.support)
            if key not in cache:
                cache[key] = refit_on_support(sub, key, opts, warm=fit)
            table[k, j] = validation_nll(prob, cache[key], valid)
    mean = table.mean(axis=0)
    se = table.std(axis=0, ddof=1) / math.sqrt(folds)
    j_star = int(np.argmin(mean))
    ok = np.flatnonzero(mean <= mean[j_star] + se[j_star])
    j_1se = int(ok.min())  # grid is decreasing, so the smallest index is the largest lambda
    full_path = s2_path(prob, opts=opts, lambdas=lambdas)
    return SCVResult(lambdas, table, mean, se, float(lambdas[j_star]), float(lambdas[j_1se]),
                     full_path[j_star], full_path)


# ---------------------------------------------------------------------------
# effective noise and theory-driven lambda

@dataclass
class EffectiveNoise:
    eps_eta: np.ndarray        # n continuous rows followed by N binary rows
    eps_m: np.ndarray
    eps_sigma_nu: np.ndarray   # n entries for 1/sigma then n for 1/nu
    raw: np.ndarray
    bounds: dict | None

    def within_bounds(self, rel=1e-12) -> dict:
        if self.bounds is None:
            raise ConfigError("bounds unavailable: the loss derivative is unbounded")
        bd = self.bounds
        raw2 = np.concatenate([np.abs(self.raw), np.abs(self.raw)])
        return {
            "eta": bool(np.all(np.abs(self.eps_eta) <= bd["eta"] * (1 + rel))),
            "m": bool(np.all(np.abs(self.eps_m) <= bd["m"] * (1 + rel) + rel)),
            "sigma_nu": bool(np.all(np.abs(self.eps_sigma_nu) <= (bd["M"] * raw2 + bd["scale_max"]) * (1 + rel))),
        }


def _params(obj):
    if isinstance(obj, TwoPartFit):
        return obj.state
    st = dict(obj)
    if "skew" in st:
        sk = st.pop("skew")
        st.update(s=math.log(sk.sigma), t=math.log(sk.nu), m=sk.m)
    return st


def per_observation_loss(prob: TwoPartProblem, eta, mvec, varsigma) -> float:
    """The loss as a function of per-observation parameters.

    ``eta`` stacks ``X beta + alpha`` (n) and ``X_tilde b + b0`` (N);
    ``mvec`` holds one pivot per positive row; ``varsigma`` holds ``1/sigma``
    then ``1/nu`` per positive row. At constant vectors this equals the
    unpenalized criterion, and its gradient defines the effective noise.
    """
    n = prob.n
    eta_c, eta_b = eta[:n], eta[n:]
    inv_s, inv_n = varsigma[:n], varsigma[n:]
    u = prob.yt - eta_c - mvec
    left = u <= 0
    z = np.where(left, u * inv_s, u * inv_n) + mvec
    Phi = prob.base.cdf(mvec)
    Z = Phi / inv_s + (1 - Phi) / inv_n
    cont = float(np.sum(prob.base.loss(z)) + np.sum(np.log(Z)))
    binary = float(np.sum(np.logaddexp(0.0, eta_b) - eta_b * prob.zind))
    return cont + binary


def effective_noise(prob: TwoPartProblem, params, M=None, B: float = 1.0) -> EffectiveNoise:
    """Negative gradient of the per-observation loss at ``params``.

    ``M`` bounds ``|rho'|`` (taken from the base when omitted) and ``B``
    bounds the logistic derivative (1). Bounds are ``None`` when ``M`` is
    infinite.
    """
    st = _params(params)
    sigma, nu, m = math.exp(st["s"]), math.exp(st["t"]), float(st["m"])
    raw = prob.yt - prob.Xc @ np.asarray(st["beta"], float) - st["alpha"] - m
    left = raw <= 0
    z = np.where(left, raw / sigma, raw / nu) + m
    d = prob.base.loss_deriv(z)
    eta_b = prob.X @ np.asarray(st["b"], float) + st["b0"]
    eps_eta = np.concatenate([np.where(left, d / sigma, d / nu), prob.zind - expit(eta_b)])
    Phi = float(prob.base.cdf(m))
    Z = sigma * Phi + nu * (1 - Phi)
    dens = float(prob.base.pdf(m))
    eps_m = np.where(left, (1 / sigma - 1) * d, (1 / nu - 1) * d) + dens * (nu - sigma) / Z
    eps_s = np.where(left, -raw * d, 0.0) + sigma ** 2 * Phi / Z
    eps_n = np.where(left, 0.0, -raw * d) + nu ** 2 * (1 - Phi) / Z
    if M is None:
        M = prob.base.deriv_bound()
    bounds = None
    if M is not None and math.isfinite(M):
        lo = min(sigma, nu)
        bounds = {
            "M": float(M),
            "B": float(B),
            "eta": M / lo + B,
            "m": max(abs(1 - 1 / sigma), abs(1 - 1 / nu)) * M + abs(sigma - nu) / lo,
            "scale_max": max(sigma, nu),
        }
    return EffectiveNoise(eps_eta, eps_m, np.concatenate([eps_s, eps_n]), raw, bounds)


def lambda_theory(p, q: float = 2.0, A: float = 1.0, omega="auto", skew: SkewSpec | None = None,
                  M=None, B: float = 1.0, base: BaseDensity | None = None) -> float:
    """``A * omega * (log p)^(1/q)``.

    ``p`` may be a count or a ``TwoPartProblem``. With ``omega="auto"`` the
    bound ``M / min(sigma, nu) + B`` is used, which needs a bounded loss
    derivative and fitted scales (``skew``; unit scales when omitted).
    """
    if isinstance(p, TwoPartProblem):
        base = base or p.base
        p = p.p
    if p < 2:
        raise DomainError("lambda_theory needs p >= 2")
    if not (q > 0 and A > 0):
        raise ConfigError("q and A must be positive")
    if isinstance(omega, str):
        if omega != "auto":
            raise ConfigError(f"omega must be a number or 'auto', got {omega!r}")
        if M is None:
            M = (base or HuberPseudo()).deriv_bound()
        if M is None or not math.isfinite(M):
            raise ConfigError("auto omega needs a bounded loss derivative (e.g. the Huber base)")
        lo = min(skew.sigma, skew.nu) if skew is not None else 1.0
        omega = M / lo + B
    return float(A * omega * math.log(p) ** (1.0 / q))


__all__ = [
    "Transform",
    "TwoPartProblem",
    "TwoPartOptions",
    "TwoPartFit",
    "SCVResult",
    "EffectiveNoise",
    "logistic_nll",
    "group_norms",
    "s2_objective",
    "s2_gradient",
    "s2_fit",
    "s2_path",
    "lambda_max",
    "lambda_grid",
    "stratified_folds",
    "validation_nll",
    "refit_on_support",
    "select_lambda_scv",
    "per_observation_loss",
    "effective_noise",
    "lambda_theory",
]
