"""Residual diagnostics through the backward pivot-blend.

Residuals from a skewed fit are mapped back onto the base scale; with the
right weights the back-transformed sample is distributed as the base
density, so ordinary goodness-of-fit tools apply. The two weight levels are
``nu/(L nu + R sigma)`` for residuals at or below the pivot and
``sigma/(L nu + R sigma)`` above it, where ``L`` and ``R`` count the groups.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .densities import BaseDensity, Gaussian, SkewSpec
from .errors import DomainError, NotConvergedError

HIST_BINS = 50
KDE_POINTS = 512
VERDICT_LEVEL = 0.05


@dataclass(frozen=True)
class WeightedSample:
    values: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).ravel()
        w = np.asarray(self.weights, dtype=float).ravel()
        if v.size == 0:
            raise DomainError("empty weighted sample")
        if v.shape != w.shape:
            raise DomainError("values and weights differ in length")
        if np.any(w <= 0):
            raise DomainError("weights must be positive")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "weights", w)

    @property
    def n(self) -> int:
        return self.values.size

    @property
    def n_eff(self) -> float:
        """Kish effective sample size ``1 / sum w^2`` (weights sum to one)."""
        return 1.0 / float(np.sum(self.weights ** 2))

    def sorted(self):
        order = np.argsort(self.values, kind="stable")
        return self.values[order], self.weights[order]

    def cumulative(self):
        """Sorted values and normalized cumulative weights, exact k/n for equal weights."""
        v, w = self.sorted()
        if np.all(w == w[0]):
            return v, np.arange(1, v.size + 1) / v.size
        cum = np.cumsum(w)
        return v, cum / cum[-1]


def backward_blend(residuals, skew: SkewSpec) -> WeightedSample:
    r = np.asarray(residuals, dtype=float).ravel()
    if r.size == 0:
        raise DomainError("backward_blend needs at least one residual")
    m, sigma, nu = skew.m, skew.sigma, skew.nu
    left = r <= m
    L = int(np.count_nonzero(left))
    R = r.size - L
    denom = L * nu + R * sigma
    values = np.where(left, (r - m) / sigma + m, (r - m) / nu + m)
    weights = np.where(left, nu / denom, sigma / denom)
    return WeightedSample(values, weights)


def weighted_ecdf(ws: WeightedSample, t):
    """Right-continuous weighted ECDF at ``t`` (scalar or array)."""
    v, cum = ws.cumulative()
    cum = np.concatenate([[0.0], cum])
    idx = np.searchsorted(v, np.asarray(t, dtype=float), side="right")
    out = cum[idx]
    return float(out) if np.ndim(out) == 0 else out


def weighted_quantile(ws: WeightedSample, probs):
    """Left-continuous inverse of the weighted ECDF."""
    v, cum = ws.cumulative()
    probs = np.asarray(probs, dtype=float)
    idx = np.searchsorted(cum, probs - 1e-12, side="left")
    return v[np.clip(idx, 0, v.size - 1)]


@dataclass(frozen=True)
class KSResult:
    statistic: float
    approx_pvalue: float
    n_eff: float


def weighted_ks(ws: WeightedSample, target: BaseDensity | None = None) -> KSResult:
    """Weighted Kolmogorov-Smirnov distance to ``target``.

    The p-value plugs the Kish effective size into the asymptotic Kolmogorov
    law; under unequal weights it is an approximation.
    """
    target = target or Gaussian()
    v, cum = ws.cumulative()
    F = target.cdf(v)
    # both sides of each jump
    before = np.concatenate([[0.0], cum[:-1]])
    d = max(float(np.max(np.abs(cum - F))), float(np.max(np.abs(before - F))))
    n_eff = ws.n_eff
    p = float(stats.kstwobign.sf(math.sqrt(n_eff) * d))
    return KSResult(d, min(max(p, 0.0), 1.0), n_eff)


def silverman_bandwidth(ws: WeightedSample) -> float:
    v, w = ws.values, ws.weights / ws.weights.sum()
    mean = float(np.sum(w * v))
    sd = math.sqrt(max(float(np.sum(w * (v - mean) ** 2)), 0.0))
    q75, q25 = weighted_quantile(ws, [0.75, 0.25])
    spread = min(sd, (q75 - q25) / 1.349) if q75 > q25 else sd
    if spread <= 0:
        spread = sd if sd > 0 else 1.0
    return 0.9 * spread * ws.n_eff ** (-0.2)


def weighted_kde(residuals, skew: SkewSpec, t_grid, h="auto"):
    """Gaussian-kernel density of the back-transformed residuals on ``t_grid``."""
    t = np.asarray(t_grid, dtype=float).ravel()
    if t.size == 0:
        raise DomainError("empty evaluation grid")
    ws = backward_blend(residuals, skew)
    return _kde(ws, t, h)


def _kde(ws: WeightedSample, t, h="auto"):
    if isinstance(h, str):
        if h != "auto":
            raise DomainError(f"unknown bandwidth rule {h!r}")
        h = silverman_bandwidth(ws)
    h = float(h)
    if not h > 0:
        raise DomainError("bandwidth must be positive")
    v, w = ws.values, ws.weights
    out = np.empty(t.size)
    # chunk to keep the (grid x sample) block small
    step = max(1, 2_000_000 // max(v.size, 1))
    for i in range(0, t.size, step):
        u = (v[None, :] - t[i:i + step, None]) / h
        out[i:i + step] = (np.exp(-0.5 * u * u) @ w) / (h * math.sqrt(2 * math.pi))
    return out


def qq_pairs(ws: WeightedSample, target: BaseDensity | None = None, n_points: int = 99):
    """(theoretical, sample) quantile pairs at probabilities k/(n_points+1)."""
    target = target or Gaussian()
    probs = np.arange(1, n_points + 1) / (n_points + 1)
    return [(float(a), float(b)) for a, b in zip(target.quantile(probs), weighted_quantile(ws, probs))]


@dataclass
class DiagnosticsBundle:
    bins: list = field(default_factory=list)
    kde: list = field(default_factory=list)
    overlay: list = field(default_factory=list)
    ks: dict = field(default_factory=dict)
    verdict: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, data: dict) -> "DiagnosticsBundle":
        return cls(
            bins=[dict(b) for b in data["bins"]],
            kde=[dict(k) for k in data["kde"]],
            overlay=[dict(o) for o in data["overlay"]],
            ks=dict(data["ks"]),
            verdict=bool(data["verdict"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "DiagnosticsBundle":
        return cls.from_dict(json.loads(text))


def diagnostics_report(fit, prob, level: float = VERDICT_LEVEL) -> DiagnosticsBundle:
    """Histogram, KDE, base overlay and weighted KS for a converged fit.

    The verdict is ``True`` when the KS p-value exceeds ``level``.
    """
    if not fit.converged:
        raise NotConvergedError(f"diagnostics need a converged fit (optimizer status: {fit.status or 'unknown'})")
    base = fit.base or prob.base
    ws = backward_blend(fit.residuals(prob.X, prob.y), fit.skew)
    lo, hi = float(ws.values.min()), float(ws.values.max())
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, HIST_BINS + 1)
    idx = np.clip(np.searchsorted(edges, ws.values, side="right") - 1, 0, HIST_BINS - 1)
    mass = np.bincount(idx, weights=ws.weights, minlength=HIST_BINS)
    bins = [{"lo": float(a), "hi": float(b), "weighted_mass": float(c)} for a, b, c in zip(edges[:-1], edges[1:], mass)]
    grid = np.linspace(lo, hi, KDE_POINTS)
    kde = _kde(ws, grid)
    overlay = base.pdf(grid)
    ks = weighted_ks(ws, base)
    return DiagnosticsBundle(
        bins=bins,
        kde=[{"t": float(a), "f": float(b)} for a, b in zip(grid, kde)],
        overlay=[{"t": float(a), "f": float(b)} for a, b in zip(grid, overlay)],
        ks={"stat": ks.statistic, "pvalue": ks.approx_pvalue},
        verdict=bool(ks.approx_pvalue > level),
    )


__all__ = [
    "WeightedSample",
    "KSResult",
    "DiagnosticsBundle",
    "backward_blend",
    "weighted_ecdf",
    "weighted_quantile",
    "weighted_ks",
    "weighted_kde",
    "silverman_bandwidth",
    "qq_pairs",
    "diagnostics_report",
]
