"""Base densities and the skewed pivot-blend construction.

A base density ``phi`` is turned into a skewed density around a pivot ``m``
by conditioning on ``y <= m`` / ``y > m``, rescaling each half about ``m``
(left scale ``sigma``, right scale ``nu``) and re-mixing with the unique
weight that keeps the result continuous at ``m``::

    f(y) = [phi((y-m)/sigma + m) 1{y<=m} + phi((y-m)/nu + m) 1{y>m}] / Z
    Z    = sigma * Phi(m) + nu * (1 - Phi(m))

Every object here is immutable; sampling takes an explicit seed.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, special

from ._rng import make_rng
from .errors import ConfigError, DegeneratePivotError, DomainError, QuadratureError

__all__ = [
    "BaseDensity",
    "Gaussian",
    "Laplace",
    "Gumbel",
    "HalfNormal",
    "MaxwellBoltzmann",
    "DoubleRayleigh",
    "GDG",
    "Exponential",
    "HuberPseudo",
    "make_base",
    "BASE_KINDS",
    "SkewSpec",
    "SPDistribution",
    "PastedDistribution",
    "sp_pdf",
    "sp_cdf",
    "sp_quantile",
    "sp_sample",
    "pasted_pdf",
    "base_cdf_numeric",
    "integrate_pdf",
    "dist_to_dict",
    "dist_from_dict",
]

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
_SQRT2 = math.sqrt(2.0)


def _arr(y):
    return np.asarray(y, dtype=float)


class BaseDensity:
    """Interface shared by the built-in base densities.

    Subclasses implement ``loss`` (= -log pdf), ``loss_deriv``, ``cdf`` and
    ``quantile`` on numpy arrays. ``support`` is a closed interval
    ``(lo, hi)`` with infinite endpoints where unbounded.
    """

    kind: str = ""
    support: tuple[float, float] = (-math.inf, math.inf)
    # Points where the loss is not differentiable (quadrature breakpoints).
    kinks: tuple[float, ...] = ()
    # Density nonincreasing on the support (a fit then sits on the lower edge).
    decreasing: bool = False

    def loss(self, y):
        raise NotImplementedError

    def loss_deriv(self, y):
        raise NotImplementedError

    def cdf(self, y):
        raise NotImplementedError

    def quantile(self, u):
        raise NotImplementedError

    def pdf(self, y):
        with np.errstate(over="ignore"):
            return np.exp(-self.loss(y))

    def deriv_bound(self) -> float | None:
        """Bound ``M`` on ``|loss_deriv|`` over the support, or None if unbounded."""
        return None

    @property
    def params(self) -> dict:
        return {}

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": self.params}

    def in_support(self, y):
        y = _arr(y)
        lo, hi = self.support
        return (y >= lo) & (y <= hi)

    def _clamp_cdf(self, y, values):
        lo, hi = self.support
        values = np.where(y < lo, 0.0, values)
        return np.where(y > hi, 1.0, values)


@dataclass(frozen=True)
class Gaussian(BaseDensity):
    kind = "gaussian"

    def loss(self, y):
        y = _arr(y)
        return 0.5 * y * y + _LOG_SQRT_2PI

    def loss_deriv(self, y):
        return _arr(y).copy()

    def cdf(self, y):
        return special.ndtr(_arr(y))

    def quantile(self, u):
        return special.ndtri(_arr(u))


@dataclass(frozen=True)
class Laplace(BaseDensity):
    kind = "laplace"
    kinks = (0.0,)

    def loss(self, y):
        return np.abs(_arr(y)) + math.log(2.0)

    def loss_deriv(self, y):
        return np.sign(_arr(y))

    def cdf(self, y):
        y = _arr(y)
        with np.errstate(over="ignore"):
            return np.where(y < 0, 0.5 * np.exp(np.minimum(y, 0)), 1.0 - 0.5 * np.exp(-np.maximum(y, 0)))

    def quantile(self, u):
        u = _arr(u)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(u < 0.5, np.log(2.0 * u), -np.log(2.0 * (1.0 - u)))

    def deriv_bound(self):
        return 1.0


@dataclass(frozen=True)
class Gumbel(BaseDensity):
    """Standard (maximum) Gumbel: ``exp(-(y + exp(-y)))``."""

    kind = "gumbel"

    def loss(self, y):
        y = _arr(y)
        with np.errstate(over="ignore"):
            return y + np.exp(-y)

    def loss_deriv(self, y):
        with np.errstate(over="ignore"):
            return 1.0 - np.exp(-_arr(y))

    def cdf(self, y):
        with np.errstate(over="ignore"):
            return np.exp(-np.exp(-_arr(y)))

    def quantile(self, u):
        return -np.log(-np.log(_arr(u)))


@dataclass(frozen=True)
class HalfNormal(BaseDensity):
    kind = "halfnormal"
    support = (0.0, math.inf)
    decreasing = True

    def loss(self, y):
        y = _arr(y)
        out = 0.5 * y * y + 0.5 * math.log(math.pi / 2.0)
        return np.where(y >= 0, out, np.inf)

    def loss_deriv(self, y):
        return _arr(y).copy()

    def cdf(self, y):
        y = _arr(y)
        return self._clamp_cdf(y, special.erf(np.maximum(y, 0) / _SQRT2))

    def quantile(self, u):
        return _SQRT2 * special.erfinv(_arr(u))


@dataclass(frozen=True)
class MaxwellBoltzmann(BaseDensity):
    """Maxwell-Boltzmann with unit scale: ``sqrt(2/pi) y^2 exp(-y^2/2)``, y >= 0."""

    kind = "maxwell"
    support = (0.0, math.inf)

    def loss(self, y):
        y = _arr(y)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = 0.5 * y * y - 2.0 * np.log(y) - 0.5 * math.log(2.0 / math.pi)
        return np.where(y > 0, out, np.inf)

    def loss_deriv(self, y):
        y = _arr(y)
        with np.errstate(divide="ignore"):
            return y - 2.0 / y

    def cdf(self, y):
        y = _arr(y)
        with np.errstate(over="ignore"):
            return self._clamp_cdf(y, special.gammainc(1.5, 0.5 * np.maximum(y, 0) ** 2))

    def quantile(self, u):
        return np.sqrt(2.0 * special.gammaincinv(1.5, _arr(u)))


@dataclass(frozen=True)
class DoubleRayleigh(BaseDensity):
    """Symmetric double Rayleigh with unit scale: ``|y| exp(-y^2/2) / 2``."""

    kind = "doublerayleigh"
    kinks = (0.0,)

    def loss(self, y):
        y = _arr(y)
        with np.errstate(divide="ignore"):
            return 0.5 * y * y - np.log(np.abs(y)) + math.log(2.0)

    def loss_deriv(self, y):
        y = _arr(y)
        with np.errstate(divide="ignore"):
            return y - 1.0 / y

    def cdf(self, y):
        y = _arr(y)
        with np.errstate(over="ignore"):
            half_tail = 0.5 * np.exp(-0.5 * y * y)
        return np.where(y <= 0, half_tail, 1.0 - half_tail)

    def quantile(self, u):
        u = _arr(u)
        with np.errstate(divide="ignore", invalid="ignore"):
            lower = -np.sqrt(-2.0 * np.log(2.0 * u))
            upper = np.sqrt(-2.0 * np.log(2.0 * (1.0 - u)))
        return np.where(u <= 0.5, lower, upper)


@dataclass(frozen=True)
class GDG(BaseDensity):
    """Generalized double-Gamma ``p/(2 g^d Gamma(d/p)) |y|^(d-1) exp(-|y|^p / g^p)``.

    The defaults (1, 1, 1) give the Laplace density.
    """

    gamma: float = 1.0
    d: float = 1.0
    p: float = 1.0
    kind = "gdg"
    kinks = (0.0,)

    def __post_init__(self):
        if not (self.gamma > 0 and self.d > 0 and self.p > 0):
            raise ConfigError(f"GDG parameters must be positive, got {self.params}")

    @property
    def params(self):
        return {"gamma": self.gamma, "d": self.d, "p": self.p}

    @property
    def _log_norm(self):
        return math.log(self.p) - math.log(2.0) - self.d * math.log(self.gamma) - special.gammaln(self.d / self.p)

    def loss(self, y):
        a = np.abs(_arr(y))
        with np.errstate(divide="ignore", invalid="ignore"):
            log_pow = (self.d - 1.0) * np.log(a) if self.d != 1.0 else np.zeros_like(a)
            out = -self._log_norm - log_pow + (a / self.gamma) ** self.p
        return out

    def loss_deriv(self, y):
        y = _arr(y)
        a = np.abs(y)
        with np.errstate(divide="ignore", invalid="ignore"):
            radial = -(self.d - 1.0) / a + self.p * a ** (self.p - 1.0) / self.gamma**self.p
            if self.d == 1.0 and self.p == 1.0:
                radial = np.full_like(a, 1.0 / self.gamma)
        return np.sign(y) * radial

    def cdf(self, y):
        y = _arr(y)
        with np.errstate(over="ignore"):
            half = 0.5 * special.gammainc(self.d / self.p, (np.abs(y) / self.gamma) ** self.p)
        return 0.5 + np.sign(y) * half

    def quantile(self, u):
        u = _arr(u)
        shape = self.d / self.p
        mag = self.gamma * special.gammaincinv(shape, np.abs(2.0 * u - 1.0)) ** (1.0 / self.p)
        return np.where(u < 0.5, -mag, mag)

    def deriv_bound(self):
        if self.d == 1.0 and self.p == 1.0:
            return 1.0 / self.gamma
        return None


@dataclass(frozen=True)
class Exponential(BaseDensity):
    kind = "exponential"
    support = (0.0, math.inf)
    decreasing = True

    def loss(self, y):
        y = _arr(y)
        return np.where(y >= 0, y, np.inf)

    def loss_deriv(self, y):
        return np.ones_like(_arr(y))

    def cdf(self, y):
        y = _arr(y)
        return self._clamp_cdf(y, -np.expm1(-np.maximum(y, 0)))

    def quantile(self, u):
        return -np.log1p(-_arr(u))

    def deriv_bound(self):
        return 1.0


@dataclass(frozen=True)
class HuberPseudo(BaseDensity):
    """Density proportional to ``exp(-huber_delta(y))``.

    The normalizing constant is fixed at construction from the closed form
    ``sqrt(2 pi) (2 Phi(delta) - 1) + 2 exp(-delta^2/2) / delta``.
    """

    delta: float = 1.345
    kind = "huber"
    _log_c: float = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.delta > 0:
            raise ConfigError(f"Huber delta must be positive, got {self.delta}")
        d = self.delta
        c = math.sqrt(2 * math.pi) * (2 * special.ndtr(d) - 1) + 2 * math.exp(-0.5 * d * d) / d
        object.__setattr__(self, "_log_c", math.log(c))

    @property
    def kinks(self):
        return (-self.delta, self.delta)

    @property
    def params(self):
        return {"delta": self.delta}

    @property
    def normalizer(self) -> float:
        return math.exp(self._log_c)

    def huber(self, y):
        a = np.abs(_arr(y))
        d = self.delta
        return np.where(a <= d, 0.5 * a * a, d * a - 0.5 * d * d)

    def loss(self, y):
        return self.huber(y) + self._log_c

    def loss_deriv(self, y):
        return np.clip(_arr(y), -self.delta, self.delta)

    def _lower_cdf(self, y):
        # valid for y <= 0
        d = self.delta
        c = self.normalizer
        tail = np.exp(0.5 * d * d + d * np.minimum(y, -d)) / d
        mid = math.exp(-0.5 * d * d) / d + math.sqrt(2 * math.pi) * (special.ndtr(y) - special.ndtr(-d))
        return np.where(y <= -d, tail, mid) / c

    def cdf(self, y):
        if isinstance(y, float):
            # scalar fast path (the fitting loop evaluates the pivot cdf per step)
            a = -abs(y)
            d = self.delta
            if a <= -d:
                low = math.exp(0.5 * d * d + d * a) / d
            else:
                low = math.exp(-0.5 * d * d) / d + math.sqrt(2 * math.pi) * (special.ndtr(a) - special.ndtr(-d))
            low /= self.normalizer
            return low if y <= 0 else 1.0 - low
        y = _arr(y)
        return np.where(y <= 0, self._lower_cdf(np.minimum(y, 0)), 1.0 - self._lower_cdf(np.minimum(-y, 0)))

    def _lower_quantile(self, u):
        # valid for u <= 1/2
        d = self.delta
        c = self.normalizer
        u_edge = math.exp(-0.5 * d * d) / (d * c)
        with np.errstate(divide="ignore", invalid="ignore"):
            tail = (np.log(u * c * d) - 0.5 * d * d) / d
            inner = special.ndtr(-d) + (u * c - math.exp(-0.5 * d * d) / d) / math.sqrt(2 * math.pi)
            mid = special.ndtri(np.clip(inner, 0.0, 1.0))
        return np.where(u <= u_edge, tail, mid)

    def quantile(self, u):
        u = _arr(u)
        return np.where(u <= 0.5, self._lower_quantile(np.minimum(u, 0.5)), -self._lower_quantile(np.minimum(1.0 - u, 0.5)))

    def deriv_bound(self):
        return self.delta


BASE_KINDS = {
    cls.kind: cls
    for cls in (Gaussian, Laplace, Gumbel, HalfNormal, MaxwellBoltzmann, DoubleRayleigh, GDG, Exponential, HuberPseudo)
}
_ALIASES = {
    "normal": "gaussian",
    "half-normal": "halfnormal",
    "maxwell-boltzmann": "maxwell",
    "maxwellboltzmann": "maxwell",
    "double-rayleigh": "doublerayleigh",
    "huberpseudo": "huber",
}


def make_base(kind: str, **params) -> BaseDensity:
    """Build a base density by name, e.g. ``make_base("huber", delta=1.5)``."""
    key = kind.lower().replace("_", "-")
    key = _ALIASES.get(key, key).replace("-", "")
    key = _ALIASES.get(key, key)
    if key not in BASE_KINDS:
        raise ConfigError(f"unknown base density {kind!r}; choose from {sorted(BASE_KINDS)}")
    return BASE_KINDS[key](**params)


# ---------------------------------------------------------------------------
# quadrature helpers

def integrate_pdf(f, a, b, points=(), epsabs=1e-13, epsrel=1e-12, limit=200):
    """Integrate ``f`` over ``[a, b]`` (endpoints may be infinite), splitting at ``points``.

    Each piece goes to QUADPACK's adaptive Gauss-Kronrod routines; failure to
    reach the tolerance raises :class:`QuadratureError`.
    """
    cuts = sorted({float(p) for p in points if a < p < b})
    edges = [a, *cuts, b]
    total = 0.0
    abserr = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        with warnings.catch_warnings():
            warnings.simplefilter("error", integrate.IntegrationWarning)
            try:
                val, err = integrate.quad(lambda t: float(f(t)), lo, hi, epsabs=epsabs, epsrel=epsrel, limit=limit)
            except integrate.IntegrationWarning as exc:
                raise QuadratureError(
                    f"quadrature did not converge on [{lo}, {hi}]",
                    diagnostics={"interval": (lo, hi), "message": str(exc)},
                ) from None
        total += val
        abserr += err
    return total


def base_cdf_numeric(base: BaseDensity, m: float, epsabs: float = 1e-10) -> float:
    """``Phi(m)`` from quadrature of ``exp(-loss)``, normalized by its total mass.

    Only the loss is used, so this works for pseudo-densities whose
    normalizing constant is unknown.
    """
    lo, hi = base.support
    m = float(m)
    if m <= lo:
        return 0.0
    if m >= hi:
        return 1.0
    kernel = lambda t: math.exp(-float(base.loss(t)))  # noqa: E731
    pts = [*base.kinks, m]
    left = integrate_pdf(kernel, lo, m, pts, epsabs=epsabs * 1e-3)
    right = integrate_pdf(kernel, m, hi, pts, epsabs=epsabs * 1e-3)
    return left / (left + right)


# ---------------------------------------------------------------------------
# skewed pivot-blend

@dataclass(frozen=True)
class SkewSpec:
    """Pivot ``m`` with left scale ``sigma`` and right scale ``nu``."""

    m: float
    sigma: float
    nu: float

    def __post_init__(self):
        for name in ("m", "sigma", "nu"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (self.sigma > 0 and self.nu > 0) or not math.isfinite(self.sigma * self.nu):
            raise DomainError(f"scales must be positive and finite, got sigma={self.sigma}, nu={self.nu}")
        if not math.isfinite(self.m):
            raise DomainError("pivot must be finite")

    def mixing_probability(self, base_cdf_at_m: float) -> float:
        q = base_cdf_at_m
        return q * self.sigma / (q * self.sigma + (1.0 - q) * self.nu)

    def to_dict(self):
        return {"m": self.m, "sigma": self.sigma, "nu": self.nu}


class SPDistribution:
    """The skewed pivot-blend law ``SP^(base)(sigma, nu, m)``."""

    def __init__(self, base: BaseDensity, skew: SkewSpec):
        self.base = base
        self.skew = skew
        self.q = float(base.cdf(skew.m))
        self.Z = skew.sigma * self.q + skew.nu * (1.0 - self.q)
        self.p_left = skew.sigma * self.q / self.Z
        lo, hi = base.support
        self.degenerate = not (lo < skew.m < hi) or self.q in (0.0, 1.0)
        if self.degenerate:
            warnings.warn(
                f"pivot m={skew.m} lies outside the support of {base.kind}; "
                "the blend reduces to a location-scale transform",
                stacklevel=2,
            )

    def __repr__(self):
        return f"SPDistribution({self.base!r}, {self.skew!r})"

    def _to_base(self, y):
        m, s, v = self.skew.m, self.skew.sigma, self.skew.nu
        left = y <= m
        return left, np.where(left, (y - m) / s + m, (y - m) / v + m)

    def logpdf(self, y):
        y = _arr(y)
        _, z = self._to_base(y)
        return -self.base.loss(z) - math.log(self.Z)

    def pdf(self, y):
        with np.errstate(over="ignore"):
            return np.exp(self.logpdf(y))

    def cdf(self, y):
        y = _arr(y)
        left, z = self._to_base(y)
        s, v = self.skew.sigma, self.skew.nu
        Fz = self.base.cdf(z)
        # right branch written as 1 - nu (1 - F) / Z, equal to (nu F + (sigma - nu) q) / Z
        out = np.where(left, s * Fz / self.Z, 1.0 - v * (1.0 - Fz) / self.Z)
        return np.clip(out, 0.0, 1.0)

    @property
    def cdf_at_pivot(self) -> float:
        return self.p_left

    def quantile(self, u):
        u = _arr(u)
        if np.any((u <= 0) | (u >= 1)) or np.any(np.isnan(u)):
            raise DomainError("quantile level must lie strictly inside (0, 1)")
        m, s, v, q = self.skew.m, self.skew.sigma, self.skew.nu, self.q
        left = u <= self.p_left
        target = np.where(left, u * self.Z / s, (u * self.Z - (s - v) * q) / v)
        target = np.clip(target, 0.0, 1.0)
        z = self.base.quantile(target)
        y = np.where(left, m + s * (z - m), m + v * (z - m))
        # the branch boundary maps exactly onto the pivot
        return np.where(u == self.p_left, m, y)

    def sample(self, n: int, seed=None):
        """Forward construction: Bernoulli branch, then conditional base draw."""
        if n < 1:
            raise DomainError("sample size must be >= 1")
        rng = make_rng(seed)
        m, s, v, q = self.skew.m, self.skew.sigma, self.skew.nu, self.q
        branch = rng.random(n) < self.p_left
        u = rng.random(n)
        # u == 0 would hit the support edge; Philox doubles live in [0, 1)
        u = np.where(u == 0.0, np.nextafter(0.0, 1.0), u)
        y0_left = self.base.quantile(u * q)
        y0_right = self.base.quantile(q + u * (1.0 - q))
        return np.where(branch, m + s * (y0_left - m), m + v * (y0_right - m))


class PastedDistribution:
    """Two different base densities joined continuously at the pivot."""

    def __init__(self, left_base: BaseDensity, right_base: BaseDensity, skew: SkewSpec):
        self.left_base = left_base
        self.right_base = right_base
        self.skew = skew
        m = skew.m
        self.phi_m = float(left_base.pdf(m))
        self.psi_m = float(right_base.pdf(m))
        if not (self.phi_m > 0 and self.psi_m > 0):
            raise DegeneratePivotError(f"both densities must be positive at the pivot m={m}")
        self.Phi_m = float(left_base.cdf(m))
        self.Psi_m = float(right_base.cdf(m))
        self.D = self.phi_m * (1.0 - self.Psi_m) * skew.nu + self.psi_m * self.Phi_m * skew.sigma
        self.p_left = self.psi_m * self.Phi_m * skew.sigma / self.D

    def pdf(self, y):
        y = _arr(y)
        m, s, v = self.skew.m, self.skew.sigma, self.skew.nu
        left = y <= m
        zl = (y - m) / s + m
        zr = (y - m) / v + m
        return np.where(left, self.psi_m * self.left_base.pdf(zl), self.phi_m * self.right_base.pdf(zr)) / self.D

    def cdf(self, y):
        y = _arr(y)
        m, s, v = self.skew.m, self.skew.sigma, self.skew.nu
        left = y <= m
        lower = self.psi_m * s * self.left_base.cdf((y - m) / s + m)
        upper = self.psi_m * s * self.Phi_m + self.phi_m * v * (self.right_base.cdf((y - m) / v + m) - self.Psi_m)
        return np.where(left, lower, upper) / self.D


# functional aliases -------------------------------------------------------

def sp_pdf(dist: SPDistribution, y):
    return dist.pdf(y)


def sp_cdf(dist: SPDistribution, y):
    return dist.cdf(y)


def sp_quantile(dist: SPDistribution, u):
    return dist.quantile(u)


def sp_sample(dist: SPDistribution, n: int, seed=None):
    return dist.sample(n, seed)


def pasted_pdf(dist: PastedDistribution, y):
    return dist.pdf(y)


def dist_to_dict(dist: SPDistribution) -> dict:
    return {"base": dist.base.to_dict(), "skew": dist.skew.to_dict()}


def dist_from_dict(data: dict) -> SPDistribution:
    base = make_base(data["base"]["kind"], **data["base"].get("params", {}))
    return SPDistribution(base, SkewSpec(**data["skew"]))
