"""Simulation harness: Toeplitz designs, the Ex1-Ex5 presets, pairs bootstrap.

Seeds: replication ``k`` of a run with master seed ``s`` uses
``SeedSequence(s).spawn(R)[k]``, which is spawned once more into a design
stream and a noise stream. Bootstrap draw ``b`` uses ``spawn(B)[b]`` the
same way. Work is farmed out to a process pool when ``PIVOTBLEND_THREADS``
is above one; results are gathered in index order so the output does not
depend on scheduling.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats
from scipy.linalg import toeplitz

from ._rng import make_rng, spawn_seeds
from .densities import (BaseDensity, DoubleRayleigh, Gaussian, HalfNormal, Laplace, MaxwellBoltzmann, SkewSpec,
                        SPDistribution, make_base)
from .errors import ConfigError, InternalError, PivotBlendError
from .speus import FitOptions, SPFit, SpeusProblem, speus_fit

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib


class UnreliableCIWarning(UserWarning):
    pass


def n_workers() -> int:
    raw = os.environ.get("PIVOTBLEND_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"PIVOTBLEND_THREADS must be an integer, got {raw!r}") from None


def _map(fn, items):
    items = list(items)
    k = min(n_workers(), len(items))
    if k <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=k) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# designs

def gen_design(n: int, p: int, kappa: float, seed) -> np.ndarray:
    """``n`` rows iid N(0, Sigma) with ``Sigma[i, j] = kappa^|i-j|``."""
    if not 0.0 <= kappa < 1.0:
        raise ConfigError(f"kappa must lie in [0, 1), got {kappa}")
    if n < 1 or p < 0:
        raise ConfigError("need n >= 1 and p >= 0")
    rng = make_rng(seed)
    if p == 0:
        return np.zeros((n, 0))
    try:
        L = np.linalg.cholesky(toeplitz(kappa ** np.arange(p)))
    except np.linalg.LinAlgError as exc:
        raise InternalError(f"Toeplitz covariance not positive definite for kappa={kappa}") from exc
    return rng.standard_normal((n, p)) @ L.T


# ---------------------------------------------------------------------------
# experiment specs

@dataclass
class ExperimentSpec:
    n: int
    p: int
    kappa: float
    beta_star: np.ndarray
    skew_star: SkewSpec
    base: BaseDensity = field(default_factory=Gaussian)
    alpha_star: float = 0.0
    replications: int = 50
    seed: int = 0
    method_opts: FitOptions = field(default_factory=FitOptions)
    include_intercept: bool = False
    zero_noise: bool = False
    name: str = "custom"
    ratio: float | None = None

    def __post_init__(self):
        self.beta_star = np.asarray(self.beta_star, dtype=float).ravel()
        if not 0.0 <= self.kappa < 1.0:
            raise ConfigError(f"kappa must lie in [0, 1), got {self.kappa}")
        if self.replications < 1:
            raise ConfigError(f"replications must be at least 1, got {self.replications}")
        if self.beta_star.size != self.p:
            raise ConfigError(f"beta_star has length {self.beta_star.size}, expected p={self.p}")
        if self.n < 1:
            raise ConfigError("n must be positive")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "ratio": self.ratio,
            "design": {"n": self.n, "p": self.p, "kappa": self.kappa, "seed": self.seed},
            "truth": {"beta_star": self.beta_star.tolist(), "alpha_star": self.alpha_star,
                      "skew_star": self.skew_star.to_dict(), "base": self.base.to_dict()},
            "replications": self.replications,
            "include_intercept": self.include_intercept,
            "zero_noise": self.zero_noise,
            "method_opts": self.method_opts.to_dict(),
        }

    @classmethod
    def from_mapping(cls, data: dict) -> "ExperimentSpec":
        """Build from the nested layout of ``to_dict`` (also the TOML layout)."""
        try:
            design, truth = data["design"], data["truth"]
            base_d = truth.get("base", "gaussian")
            if isinstance(base_d, str):
                base_d = {"kind": base_d}
            base = make_base(base_d["kind"], **dict(base_d.get("params", {})))
            sk = truth["skew_star"]
            return cls(
                n=int(design["n"]),
                p=int(design["p"]),
                kappa=float(design["kappa"]),
                seed=int(design.get("seed", 0)),
                beta_star=np.asarray(truth["beta_star"], dtype=float),
                alpha_star=float(truth.get("alpha_star", 0.0)),
                skew_star=SkewSpec(float(sk["m"]), float(sk["sigma"]), float(sk["nu"])),
                base=base,
                replications=int(data.get("replications", 50)),
                method_opts=FitOptions.from_mapping(dict(data.get("method_opts", {}))),
                include_intercept=bool(data.get("include_intercept", False)),
                zero_noise=bool(data.get("zero_noise", False)),
                name=str(data.get("name", "custom")),
                ratio=data.get("ratio"),
            )
        except KeyError as exc:
            raise ConfigError(f"experiment spec is missing {exc.args[0]!r}") from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, PivotBlendError):
                raise
            raise ConfigError(f"bad experiment spec: {exc}") from None

    @classmethod
    def from_toml(cls, text_or_path) -> "ExperimentSpec":
        if isinstance(text_or_path, Path) or (isinstance(text_or_path, str) and "\n" not in text_or_path
                                              and text_or_path.endswith(".toml")):
            text = Path(text_or_path).read_text(encoding="utf-8")
        else:
            text = text_or_path
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML: {exc}") from None
        return cls.from_mapping(data)


BETA_STAR = (12.0, 13.0, 14.0)


def maxwell_median() -> float:
    """Median of the standard Maxwell-Boltzmann law (chi with 3 d.o.f.)."""
    return float(stats.chi.ppf(0.5, 3))


def double_rayleigh_mode() -> float:
    """Right mode of ``|y| exp(-y^2/2) / 2``: the derivative ``(1 - y^2) e^{-y^2/2}`` vanishes at 1."""
    return 1.0


# name -> (base factory, n, kappa, pivot, fixed scale, which side the ratio scales, default ratio, known ratios)
# ``ratio`` is nu/sigma for ex1/ex2 and sigma/nu for ex3-ex5. Known ratios map
# the rounded table labels onto the scales actually used.
_PRESETS = {
    "ex1-gauss": (Gaussian, 300, 0.5, lambda: 0.0, 0.2, "nu", 2.0, {2.0: 0.4, 3.0: 0.6, 6.0: 1.2}),
    "ex1-laplace": (Laplace, 300, 0.5, lambda: 0.0, 0.2, "nu", 2.0, {2.0: 0.4, 3.0: 0.6, 6.0: 1.2}),
    "ex2-gauss": (Gaussian, 300, 0.2, lambda: float(stats.norm.ppf(0.75)), 0.3, "nu", 3.0,
                  {1.7: 0.5, 2.3: 0.7, 3.0: 0.9}),
    "ex2-laplace": (Laplace, 300, 0.2, lambda: math.log(2.0), 0.3, "nu", 3.0, {1.7: 0.5, 2.3: 0.7, 3.0: 0.9}),
    "ex3": (HalfNormal, 700, 0.1, lambda: math.sqrt(2.0 / math.pi), 0.1, "sigma", 4.0,
            {2.0: 0.2, 3.0: 0.3, 4.0: 0.4}),
    "ex4": (MaxwellBoltzmann, 500, 0.2, maxwell_median, 0.1, "sigma", 4.0, {4.0: 0.4, 5.0: 0.5, 6.0: 0.6}),
    "ex5": (DoubleRayleigh, 500, 0.1, double_rayleigh_mode, 0.1, "sigma", 4.0, {2.0: 0.2, 3.0: 0.3, 4.0: 0.4}),
}
PRESET_NAMES = tuple(_PRESETS)


def preset(name: str, ratio: float | None = None, reps: int = 50, seed: int = 0,
           opts: FitOptions | None = None) -> ExperimentSpec:
    if name not in _PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}")
    base_cls, n, kappa, pivot, fixed, side, default, known = _PRESETS[name]
    ratio = default if ratio is None else float(ratio)
    if not ratio > 0:
        raise ConfigError("ratio must be positive")
    other = next((v for k, v in known.items() if abs(k - ratio) < 0.05), fixed * ratio)
    sigma, nu = (fixed, other) if side == "nu" else (other, fixed)
    return ExperimentSpec(
        n=n, p=3, kappa=kappa, seed=seed, beta_star=np.array(BETA_STAR), alpha_star=0.0,
        skew_star=SkewSpec(pivot(), sigma, nu), base=base_cls(), replications=reps,
        method_opts=opts or FitOptions(), name=name, ratio=ratio,
    )


# ---------------------------------------------------------------------------
# running

@dataclass(frozen=True)
class MetricsRow:
    err_beta: float
    err_sigma: float
    err_nu: float
    err_m: float
    mean_runtime: float
    n_ok: int
    n_failed: int

    def to_dict(self):
        return asdict(self)


@dataclass
class ReplicationRow:
    rep: int
    ok: bool
    beta: list
    alpha: float
    m: float
    sigma: float
    nu: float
    runtime: float
    error: str = ""


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    metrics: MetricsRow
    rows: list

    def table_csv(self) -> str:
        p = self.spec.p
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rep", "ok"] + [f"beta{j + 1}" for j in range(p)] + ["alpha", "m", "sigma", "nu", "error"])
        for r in self.rows:
            vals = r.beta if r.ok else [math.nan] * p
            w.writerow([r.rep, int(r.ok)] + [repr(float(v)) for v in vals]
                       + [repr(float(x)) for x in (r.alpha, r.m, r.sigma, r.nu)] + [r.error])
        return buf.getvalue()

    def metrics_csv(self) -> str:
        """One summary row: Err(beta), Err(sigma), Err(nu), Err(m) and mean runtime."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["preset", "base", "ratio", "err_beta", "err_sigma", "err_nu", "err_m", "n_ok", "n_failed"])
        m = self.metrics
        w.writerow([self.spec.name, self.spec.base.kind, "" if self.spec.ratio is None else self.spec.ratio,
                    f"{m.err_beta:.6g}", f"{m.err_sigma:.6g}", f"{m.err_nu:.6g}", f"{m.err_m:.6g}",
                    m.n_ok, m.n_failed])
        return buf.getvalue()


def simulate_data(spec: ExperimentSpec, seed_seq):
    """Design and response for one replication."""
    s_design, s_noise = seed_seq.spawn(2)
    X = gen_design(spec.n, spec.p, spec.kappa, s_design)
    if spec.zero_noise:
        eps = np.zeros(spec.n)
    else:
        eps = SPDistribution(spec.base, spec.skew_star).sample(spec.n, seed=make_rng(s_noise))
    y = X @ spec.beta_star + spec.alpha_star + eps
    return X, y


def _one_replication(args) -> ReplicationRow:
    spec, k, seed_seq = args
    X, y = simulate_data(spec, seed_seq)
    t0 = time.perf_counter()
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fit = speus_fit(SpeusProblem(X, y, spec.base, include_intercept=spec.include_intercept), spec.method_opts)
        if not all(np.isfinite(v) for v in (fit.skew.m, fit.skew.sigma, fit.skew.nu)) or not np.all(np.isfinite(fit.beta)):
            raise PivotBlendError("non-finite estimate")
        return ReplicationRow(k, True, [float(b) for b in fit.beta], fit.alpha, fit.skew.m, fit.skew.sigma,
                              fit.skew.nu, time.perf_counter() - t0)
    except PivotBlendError as exc:
        return ReplicationRow(k, False, [], math.nan, math.nan, math.nan, math.nan, time.perf_counter() - t0,
                              f"{type(exc).__name__}: {exc}")


def aggregate(spec: ExperimentSpec, rows) -> MetricsRow:
    ok = [r for r in rows if r.ok]
    if not ok:
        return MetricsRow(math.nan, math.nan, math.nan, math.nan, math.nan, 0, len(rows))
    B = np.array([r.beta for r in ok]).reshape(len(ok), spec.p)
    sk = spec.skew_star
    err_beta = math.sqrt(float(np.mean(np.sum((B - spec.beta_star) ** 2, axis=1))))
    rel = lambda vals, true: math.sqrt(float(np.mean((np.asarray(vals) / true - 1.0) ** 2)))
    err_sigma = rel([r.sigma for r in ok], sk.sigma)
    err_nu = rel([r.nu for r in ok], sk.nu)
    err_m = math.sqrt(float(np.mean((np.array([r.m for r in ok]) - sk.m) ** 2)))
    runtime = float(np.mean([r.runtime for r in ok]))
    return MetricsRow(err_beta, err_sigma, err_nu, err_m, runtime, len(ok), len(rows) - len(ok))


def run_experiment(spec: ExperimentSpec) -> ExperimentResult:
    seeds = spawn_seeds(spec.seed, spec.replications)
    rows = _map(_one_replication, [(spec, k, s) for k, s in enumerate(seeds)])
    rows.sort(key=lambda r: r.rep)
    return ExperimentResult(spec, aggregate(spec, rows), rows)


def write_run(result: ExperimentResult, out_dir) -> Path:
    """replications.csv, metrics.csv, metrics.json, the spec echo and timing.json.

    Wall-clock times go to timing.json only, so every other file is
    byte-identical across reruns with the same spec and seed.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "replications.csv").write_text(result.table_csv(), encoding="utf-8")
    (out / "metrics.csv").write_text(result.metrics_csv(), encoding="utf-8")
    metrics = result.metrics.to_dict()
    runtime = metrics.pop("mean_runtime")
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n", encoding="utf-8")
    timing = {"mean_runtime": runtime, "per_replication": [r.runtime for r in result.rows]}
    (out / "timing.json").write_text(json.dumps(timing, indent=2) + "\n", encoding="utf-8")
    (out / "spec.json").write_text(json.dumps(result.spec.to_dict(), indent=2) + "\n", encoding="utf-8")
    return out


# ---------------------------------------------------------------------------
# bootstrap

MIN_DRAWS = 10
MAX_FAIL_FRACTION = 0.2


@dataclass
class BootstrapResult:
    ci_m: tuple
    ci_sigma: tuple
    ci_nu: tuple
    ci_beta: list
    draws: np.ndarray            # B x (p + 4): beta..., alpha, m, sigma, nu; failed draws are nan rows
    level: float
    n_failed: int
    valid: bool
    notes: list = field(default_factory=list)

    def intervals(self) -> dict:
        return {
            "level": self.level,
            "m": list(self.ci_m),
            "sigma": list(self.ci_sigma),
            "nu": list(self.ci_nu),
            "beta": [list(c) for c in self.ci_beta],
            "n_draws": int(self.draws.shape[0]),
            "n_failed": self.n_failed,
            "valid": self.valid,
            "notes": list(self.notes),
        }

    def draws_csv(self) -> str:
        p = self.draws.shape[1] - 4
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["draw"] + [f"beta{j + 1}" for j in range(p)] + ["alpha", "m", "sigma", "nu"])
        for i, row in enumerate(self.draws):
            w.writerow([i] + [repr(float(v)) for v in row])
        return buf.getvalue()


def _boot_draw(args):
    X, y, base, intercept, opts, init, seed_seq = args
    rng = make_rng(seed_seq)
    rows = rng.integers(0, X.shape[0], X.shape[0])
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            f = speus_fit(SpeusProblem(X[rows], y[rows], base, include_intercept=intercept), opts, init=init)
    except PivotBlendError:
        return None
    out = np.concatenate([f.beta, [f.alpha, f.skew.m, f.skew.sigma, f.skew.nu]])
    return out if np.all(np.isfinite(out)) else None


def bootstrap(X, y, base: BaseDensity | None = None, B: int = 100, level: float = 0.90, seed=0,
              opts: FitOptions | None = None, fit: SPFit | None = None,
              include_intercept: bool = True, warm_start: bool = False) -> BootstrapResult:
    """Pairs bootstrap with percentile intervals.

    Each resample is refit from the usual multi-start initialization. Warm
    starts at the full-data fit are faster but tend to stay in its basin, which
    shrinks the spread of the scale draws and the coverage of their intervals.
    """
    if B < 1:
        raise ConfigError("B must be at least 1")
    if not 0.0 < level < 1.0:
        raise ConfigError("level must lie in (0, 1)")
    base = base or Gaussian()
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    opts = opts or FitOptions()
    if warm_start and fit is None:
        fit = speus_fit(SpeusProblem(X, y, base, include_intercept=include_intercept), opts)
    init = fit if warm_start else None
    seeds = spawn_seeds(seed, B)
    res = _map(_boot_draw, [(X, y, base, include_intercept, opts, init, s) for s in seeds])
    p = X.shape[1]
    draws = np.array([r if r is not None else np.full(p + 4, np.nan) for r in res])
    good = draws[np.all(np.isfinite(draws), axis=1)]
    n_failed = B - good.shape[0]
    notes = []
    valid = True
    if B < MIN_DRAWS:
        valid = False
        notes.append(f"only {B} draws; at least {MIN_DRAWS} are needed for usable intervals")
    if n_failed > MAX_FAIL_FRACTION * B:
        valid = False
        msg = f"{n_failed} of {B} bootstrap refits failed; intervals are unreliable"
        notes.append(msg)
        warnings.warn(msg, UnreliableCIWarning, stacklevel=2)
    lo_q, hi_q = (1.0 - level) / 2.0, 1.0 - (1.0 - level) / 2.0

    def ci(col):
        if good.shape[0] == 0:
            return (math.nan, math.nan)
        a, b = np.quantile(good[:, col], [lo_q, hi_q])
        return (float(a), float(b))

    cis = [ci(j) for j in range(p + 4)]
    if any(b - a <= 0 for a, b in cis[p + 1:]):
        valid = False
        notes.append("zero-width interval")
    return BootstrapResult(cis[p + 1], cis[p + 2], cis[p + 3], cis[:p], draws, level, n_failed, valid, notes)


# ---------------------------------------------------------------------------
# two-part data and selection frequencies

def gen_twopart(N: int = 400, p: int = 20, k: int = 4, seed=0, kappa: float = 0.3, coef: float = 1.0,
                skew: SkewSpec = SkewSpec(0.5, 0.4, 1.0), base: BaseDensity | None = None):
    """Semicontinuous data with the first ``k`` rows jointly active.

    Zero indicator ~ Bernoulli(sigmoid(X b)); positives ``exp(1 + X beta + eps)``
    with skewed noise. Returns ``(X, y, active)``.
    """
    if not 0 <= k <= p:
        raise ConfigError("need 0 <= k <= p")
    rng = make_rng(seed)
    X = gen_design(N, p, kappa, rng)
    signs_b = np.resize([1.0, -1.0], k)
    signs_beta = np.resize([1.0, 1.0, -1.0, -1.0], k)
    b = np.zeros(p)
    beta = np.zeros(p)
    b[:k] = coef * signs_b
    beta[:k] = 0.6 * coef * signs_beta
    zero = rng.random(N) < 1.0 / (1.0 + np.exp(-(X @ b)))
    eps = SPDistribution(base or Gaussian(), skew).sample(N, seed=rng)
    y = np.where(zero, 0.0, np.exp(1.0 + X @ beta + eps))
    return X, y, np.arange(k)


@dataclass
class SelectionFrequencies:
    frequencies: np.ndarray
    supports: list
    n_failed: int
    valid: bool

    def table(self, names=None) -> list[dict]:
        names = names or [f"x{j + 1}" for j in range(self.frequencies.size)]
        return [{"predictor": nm, "frequency": float(f)} for nm, f in zip(names, self.frequencies)]


def _sel_draw(args):
    from .twopart import select_lambda_scv

    prob, folds, n_lambda, opts, seed_seq = args
    rng = make_rng(seed_seq)
    N = prob.N
    # resample zeros and positives separately so every draw keeps both parts
    zeros, pos = np.flatnonzero(prob.zind == 1), np.flatnonzero(prob.zind == 0)
    rows = np.concatenate([rng.choice(zeros, zeros.size), rng.choice(pos, pos.size)])
    assert rows.size == N
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res = select_lambda_scv(prob.subset(rows), folds, opts, n_lambda=n_lambda,
                                    seed=int(rng.integers(2 ** 31)))
        return [int(j) for j in res.fit.support]
    except PivotBlendError:
        return None


def selection_frequencies(prob, B: int = 100, seed=0, folds: int = 5, n_lambda: int = 20,
                          opts=None) -> SelectionFrequencies:
    """Fraction of bootstrap draws whose SCV-selected support contains each predictor."""
    if B < 1:
        raise ConfigError("B must be at least 1")
    seeds = spawn_seeds(seed, B)
    res = _map(_sel_draw, [(prob, folds, n_lambda, opts, s) for s in seeds])
    good = [r for r in res if r is not None]
    counts = np.zeros(prob.p)
    for sup in good:
        counts[sup] += 1
    n_failed = B - len(good)
    valid = B >= MIN_DRAWS and n_failed <= MAX_FAIL_FRACTION * B
    if n_failed > MAX_FAIL_FRACTION * B:
        warnings.warn(f"{n_failed} of {B} selection draws failed", UnreliableCIWarning, stacklevel=2)
    freq = counts / max(len(good), 1)
    return SelectionFrequencies(freq, res, n_failed, valid)


__all__ = [
    "ExperimentSpec",
    "MetricsRow",
    "ReplicationRow",
    "ExperimentResult",
    "BootstrapResult",
    "SelectionFrequencies",
    "UnreliableCIWarning",
    "PRESET_NAMES",
    "gen_design",
    "preset",
    "maxwell_median",
    "double_rayleigh_mode",
    "simulate_data",
    "run_experiment",
    "aggregate",
    "write_run",
    "bootstrap",
    "gen_twopart",
    "selection_frequencies",
    "n_workers",
]
