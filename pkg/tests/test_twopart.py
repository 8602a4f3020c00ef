import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize
from scipy.special import expit

from pivotblend.densities import Gaussian, HuberPseudo, Laplace, SkewSpec, SPDistribution
from pivotblend.errors import ConfigError, DomainError, InternalError, PartitionError, StratificationError
from pivotblend.simharness import gen_twopart
from pivotblend.speus import SpeusProblem, speus_core, speus_fit
from pivotblend.twopart import (Transform, TwoPartFit, TwoPartOptions, TwoPartProblem, effective_noise, lambda_grid,
                                lambda_max, lambda_theory, logistic_nll, per_observation_loss, s2_fit, s2_gradient,
                                s2_objective, s2_path, select_lambda_scv, stratified_folds)

TOY_X = np.array([[0.5, -1.0], [1.5, 0.2], [-0.3, 0.8], [2.0, -0.4], [-1.2, 1.1], [0.1, 0.0]])
TOY_Y = np.array([0.0, 2.0, 0.0, 5.0, 1.0, 0.0])


@pytest.fixture(scope="module")
def small():
    X, y, active = gen_twopart(N=200, p=6, k=2, seed=3, coef=1.5)
    return TwoPartProblem(X, y), active


def _fd(f, x, rel=1e-6):
    g = np.empty_like(x)
    for i in range(x.size):
        h = rel * max(1.0, abs(x[i]))
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


# ---------------------------------------------------------------------------
# problem and transforms

def test_partition_errors():
    with pytest.raises(PartitionError, match="no zero"):
        TwoPartProblem(TOY_X, TOY_Y + 1.0)
    with pytest.raises(PartitionError, match="no positive"):
        TwoPartProblem(TOY_X, np.zeros(6))
    with pytest.raises(DomainError):
        TwoPartProblem(TOY_X, -TOY_Y)
    with pytest.warns(UserWarning, match="below 1e-12"):
        TwoPartProblem(TOY_X, np.where(TOY_Y == 1.0, 1e-13, TOY_Y))


def test_partition_indices():
    prob = TwoPartProblem(TOY_X, TOY_Y)
    assert prob.pos.tolist() == [1, 3, 4]
    assert prob.n == 3 and prob.N == 6
    assert np.allclose(prob.yt, np.log([2.0, 5.0, 1.0]))


def test_transforms():
    y = np.array([1.0, 4.0, 9.0])
    assert np.allclose(Transform("identity")(y), y)
    assert np.allclose(Transform.parse("power:0.5")(y), (np.sqrt(y) - 1) / 0.5)
    assert Transform.parse("LOG") == Transform("log")
    with pytest.raises(ConfigError):
        Transform("sqrt")
    with pytest.raises(ConfigError):
        Transform("power", 0.0)


# ---------------------------------------------------------------------------
# objective

def test_lognormal_two_part_reduction():
    prob = TwoPartProblem(TOY_X, TOY_Y, base=Gaussian(), tau=0.0)
    b, b0 = np.array([0.3, -0.2]), 0.1
    beta, alpha = np.array([0.4, 0.1]), 0.2
    f = s2_objective(prob, b, beta, 0.0, 0.0, 0.0, b0=b0, alpha=alpha, lam=0.0)
    eta = TOY_X @ b + b0
    pi0 = expit(eta)  # probability of a zero
    zero = TOY_Y == 0
    ref = -float(np.sum(np.log(pi0[zero])) + np.sum(np.log1p(-pi0[~zero])))
    r = np.log(TOY_Y[~zero]) - TOY_X[~zero] @ beta - alpha
    ref += float(np.sum(0.5 * r ** 2 + 0.5 * math.log(2 * math.pi)))
    assert f == pytest.approx(ref, rel=1e-13)


def test_penalty_three_four_five():
    prob = TwoPartProblem(TOY_X, TOY_Y, base=Gaussian(), tau=0.0, scaling="sqrt_n")
    beta = np.array([3 / math.sqrt(prob.n), 0.0])
    b = np.array([4 / math.sqrt(prob.N), 0.0])
    f1 = s2_objective(prob, b, beta, 0.0, 0.0, 0.0, lam=2.0)
    f0 = s2_objective(prob, b, beta, 0.0, 0.0, 0.0, lam=0.0)
    assert f1 - f0 == pytest.approx(2.0 * 5.0, rel=1e-13)


def test_null_model_hand_computation():
    """All coefficients, intercepts and the pivot at zero, unit scales, Gaussian base."""
    prob = TwoPartProblem(TOY_X, TOY_Y, base=Gaussian(), tau=0.0)
    f = s2_objective(prob, np.zeros(2), np.zeros(2), 0.0, 0.0, 0.0, lam=3.0)
    # binary part: six rows of log(1 + e^0) = log 2
    binary = 6 * 0.6931471805599453
    # continuous part: (log 2)^2/2 + (log 5)^2/2 + 0 + 3 * log sqrt(2 pi)
    cont = 0.5 * 0.4804530139182014 + 0.5 * 2.5902903939802346 + 3 * 0.9189385332046727
    assert f == pytest.approx(binary + cont, rel=1e-14)


def test_tau_terms():
    prob = TwoPartProblem(TOY_X, TOY_Y, base=Gaussian(), tau=0.8)
    f = s2_objective(prob, np.zeros(2), np.zeros(2), math.log(0.5), math.log(2.0), 0.3, lam=0.0)
    g = s2_objective(TwoPartProblem(TOY_X, TOY_Y, base=Gaussian(), tau=0.0), np.zeros(2), np.zeros(2),
                     math.log(0.5), math.log(2.0), 0.3, lam=0.0)
    assert f - g == pytest.approx(0.4 * (4.0 + 0.25) + 0.4 * 0.09, rel=1e-12)


@settings(max_examples=50)
@given(st.integers(0, 10_000))
def test_prop_separable_at_lambda_zero(seed):
    rng = np.random.default_rng(seed)
    prob = TwoPartProblem(TOY_X, TOY_Y, base=HuberPseudo(), tau=0.3)
    b, beta = rng.normal(size=2), rng.normal(size=2)
    b0, alpha, s, t, m = rng.normal(size=5)
    f = s2_objective(prob, b, beta, s, t, m, b0=b0, alpha=alpha, lam=0.0)
    lg, _, _ = logistic_nll(prob.X, prob.zind, b, b0)
    sp = speus_core(prob.Xc, prob.yt, prob.base, beta, alpha, s, t, m, 0.3, 0.3, need_grad=False)[0]
    assert abs(f - (lg + sp)) < 1e-12 * max(1.0, abs(f))


def test_gradient_matches_fd():
    X, y, _ = gen_twopart(N=150, p=5, k=2, seed=4)
    prob = TwoPartProblem(X, y, lam=0.7)
    rng = np.random.default_rng(5)
    p = prob.p
    checked = 0
    while checked < 20:
        v = np.concatenate([rng.normal(0, 0.5, p), [rng.normal()], rng.normal(0, 0.5, p),
                            [1 + rng.normal(0, 0.3), rng.normal(-0.5, 0.3), rng.normal(0, 0.3), rng.normal(0, 0.5)]])
        b, b0, beta, alpha, s, t, m = v[:p], v[p], v[p + 1:2 * p + 1], *v[2 * p + 1:]
        r = prob.yt - prob.Xc @ beta - alpha
        z = np.where(r <= m, (r - m) / math.exp(s), (r - m) / math.exp(t)) + m
        if np.min(np.abs(r - m)) < 1e-3 or np.min(np.abs(np.abs(z) - prob.base.delta)) < 1e-3:
            continue

        def f(w):
            return s2_objective(prob, w[:p], w[p + 1:2 * p + 1], *w[2 * p + 2:], b0=w[p], alpha=w[2 * p + 1])

        g = s2_gradient(prob, b, beta, s, t, m, b0=b0, alpha=alpha)
        fd = _fd(f, v)
        assert np.max(np.abs(g - fd) / np.maximum(1.0, np.abs(fd))) < 1e-5
        checked += 1


# ---------------------------------------------------------------------------
# fitting

def test_lambda_max_gives_empty_support(small):
    prob, _ = small
    lmax = lambda_max(prob)
    assert s2_fit(prob, lmax * 1.0001).support == []
    assert s2_fit(prob, lmax * 0.8).support != []


def test_lambda_zero_matches_separate_fits(small):
    prob, _ = small
    fit = s2_fit(prob, 0.0)
    assert fit.support == list(range(prob.p))
    A = np.column_stack([prob.X, np.ones(prob.N)])

    def nll(x):
        eta = A @ x
        return float(np.sum(np.logaddexp(0, eta) - eta * prob.zind)), A.T @ (expit(eta) - prob.zind)

    res = optimize.minimize(nll, np.zeros(prob.p + 1), jac=True, method="BFGS", options={"gtol": 1e-10})
    assert np.max(np.abs(fit.b - res.x[:-1])) < 1e-4 and abs(fit.b0 - res.x[-1]) < 1e-4
    sfit = speus_fit(SpeusProblem(prob.Xc, prob.yt, prob.base, tau_scale=prob.tau, tau_pivot=prob.tau))
    assert np.max(np.abs(fit.beta - sfit.beta)) < 1e-4


def test_mm_descent(small):
    prob, _ = small
    fit = s2_fit(prob, 0.2 * lambda_max(prob))
    tr = np.asarray(fit.objective_trace)
    assert np.all(np.diff(tr) <= 1e-10 * np.abs(tr[:-1]).clip(1.0))
    assert fit.converged


def test_mm_ascent_is_internal_error(small, monkeypatch):
    import pivotblend.twopart as tp

    prob, _ = small
    real = tp._logistic_newton
    monkeypatch.setattr(tp, "_logistic_newton", lambda *a, **k: (real(*a, **k)[0] + 5.0, 0.0))
    with pytest.raises(InternalError, match="increased"):
        s2_fit(prob, 0.2 * lambda_max(prob))


def test_intercepts_unpenalized(small):
    prob, _ = small
    fit = s2_fit(prob, 10 * lambda_max(prob))
    assert fit.support == []
    frac = prob.zind.mean()
    assert fit.b0 == pytest.approx(math.log(frac / (1 - frac)), abs=1e-6)
    # the continuous part is still centred on the positive responses
    med = fit.alpha + float(SPDistribution(prob.base, fit.skew).quantile(0.5))
    assert abs(med - np.median(prob.yt)) < 0.3


def test_selection_scale_equivariance(small):
    prob, _ = small
    lam = 0.3 * lambda_max(prob)
    base = s2_fit(prob, lam).support
    X2 = prob.X.copy()
    X2[:, 1] *= 7.0
    X2[:, 4] *= 0.2
    assert s2_fit(TwoPartProblem(X2, prob.y), lam).support == base


def test_fit_round_trip(small):
    prob, _ = small
    fit = s2_fit(prob, 0.3 * lambda_max(prob))
    back = TwoPartFit.from_dict(fit.to_dict())
    assert back.support == fit.support and np.array_equal(back.beta, fit.beta) and back.skew == fit.skew


def test_options():
    o = TwoPartOptions.from_mapping({"max_outer": 10, "speus": {"max_iter": 100}})
    assert o.max_outer == 10 and o.speus.max_iter == 100
    with pytest.raises(ConfigError):
        TwoPartOptions.from_mapping({"nope": 1})
    with pytest.raises(ConfigError):
        lambda_grid(1.0, 1)
    with pytest.raises(ConfigError):
        s2_fit(TwoPartProblem(TOY_X, TOY_Y), -1.0)


# ---------------------------------------------------------------------------
# path and cross-validation

def test_path_shape(small):
    prob, _ = small
    path = s2_path(prob, n_lambda=8)
    lams = [f.lambda_used for f in path]
    assert lams[0] == pytest.approx(lambda_max(prob)) and lams[-1] == pytest.approx(1e-3 * lams[0])
    assert path[0].support == []
    assert set(path[0].support) <= set(path[-1].support)
    assert len(path[-1].support) == prob.p


def test_path_nesting_rate():
    ok = 0
    for seed in range(20):
        X, y, _ = gen_twopart(N=150, p=6, k=2, seed=100 + seed)
        path = s2_path(TwoPartProblem(X, y), n_lambda=6)
        ok += set(path[1].support) <= set(path[-1].support)
    assert ok >= 19


def test_warm_start_saves_iterations():
    X, y, _ = gen_twopart(N=300, p=10, k=4, seed=6)
    prob = TwoPartProblem(X, y)
    warm = s2_path(prob, n_lambda=10, warm=True)
    cold = s2_path(prob, n_lambda=10, warm=False)
    n_warm = sum(f.n_outer for f in warm)
    n_cold = sum(f.n_outer for f in cold)
    assert n_warm <= 0.8 * n_cold


def test_stratified_folds():
    zind = np.array([1.0] * 7 + [0.0] * 13)
    labels = stratified_folds(zind, 5, seed=1)
    for k in range(5):
        assert (zind[labels == k] == 1).any() and (zind[labels == k] == 0).any()
    assert np.array_equal(labels, stratified_folds(zind, 5, seed=1))
    with pytest.raises(StratificationError):
        stratified_folds(np.array([1.0] * 10 + [0.0] * 3), 5)
    with pytest.raises(ConfigError):
        stratified_folds(zind, 1)


def test_scv_table(small):
    prob, active = small
    res = select_lambda_scv(prob, folds=3, n_lambda=6, seed=0)
    assert res.cv_table.shape == (3, 6) and np.all(np.isfinite(res.cv_table))
    assert res.lambda_1se >= res.lambda_star
    assert set(active) <= set(res.fit.support)


@pytest.mark.slow
def test_scv_pure_noise_selects_little():
    empty = 0
    for seed in range(5):
        X, y, _ = gen_twopart(N=200, p=8, k=0, seed=200 + seed)
        res = select_lambda_scv(TwoPartProblem(X, y), folds=5, n_lambda=10, seed=seed)
        empty += len(res.fit.support) <= 1
    assert empty >= 4


@pytest.mark.slow
def test_theory_lambda_order_of_magnitude():
    X, y, _ = gen_twopart(N=400, p=20, k=4, seed=0)
    prob = TwoPartProblem(X, y)
    res = select_lambda_scv(prob, n_lambda=20, seed=0)
    lt = lambda_theory(prob, skew=res.fit.skew)
    assert res.lambda_star / 10 <= lt <= res.lambda_star * 10


# ---------------------------------------------------------------------------
# effective noise and theory lambda

def _truth(X, active, seed_skew=SkewSpec(0.5, 0.4, 1.0)):
    p = X.shape[1]
    b = np.zeros(p)
    beta = np.zeros(p)
    k = active.size
    b[:k] = np.resize([1.0, -1.0], k)
    beta[:k] = 0.6 * np.resize([1.0, 1.0, -1.0, -1.0], k)
    return dict(b=b, b0=0.0, beta=beta, alpha=1.0, skew=seed_skew)


def test_effective_noise_bounds():
    for seed in range(10):
        X, y, active = gen_twopart(N=300, p=10, k=4, seed=seed, base=Laplace())
        prob = TwoPartProblem(X, y, base=HuberPseudo(1.345))
        en = effective_noise(prob, _truth(X, active))
        assert en.bounds["eta"] == pytest.approx(1.345 / 0.4 + 1.0)
        assert all(en.within_bounds().values())


def test_effective_noise_matches_numeric_gradient():
    X, y, active = gen_twopart(N=120, p=4, k=2, seed=7)
    prob = TwoPartProblem(X, y, base=HuberPseudo(1.345))
    truth = _truth(X, active)
    en = effective_noise(prob, truth)
    sk = truth["skew"]
    n, N = prob.n, prob.N
    eta = np.concatenate([prob.Xc @ truth["beta"] + truth["alpha"], X @ truth["b"] + truth["b0"]])
    mvec = np.full(n, sk.m)
    vs = np.concatenate([np.full(n, 1 / sk.sigma), np.full(n, 1 / sk.nu)])
    f = lambda e, mm, v: per_observation_loss(prob, e, mm, v)  # noqa: E731
    g_eta = _fd(lambda e: f(e, mvec, vs), eta)
    g_m = _fd(lambda mm: f(eta, mm, vs), mvec)
    g_v = _fd(lambda v: f(eta, mvec, v), vs)
    for got, fd in ((en.eps_eta, -g_eta), (en.eps_m, -g_m), (en.eps_sigma_nu, -g_v)):
        assert np.max(np.abs(got - fd) / np.maximum(1.0, np.abs(fd))) < 1e-5
    assert en.eps_eta.size == n + N


def test_effective_noise_unit_scales():
    X, y, active = gen_twopart(N=200, p=4, k=2, seed=8)
    prob = TwoPartProblem(X, y, base=HuberPseudo(1.345))
    en = effective_noise(prob, _truth(X, active, SkewSpec(0.3, 1.0, 1.0)))
    assert np.all(en.eps_m == 0.0)
    assert en.bounds["m"] == 0.0


def test_effective_noise_unbounded():
    X, y, active = gen_twopart(N=200, p=4, k=2, seed=9)
    en = effective_noise(TwoPartProblem(X, y, base=Gaussian()), _truth(X, active))
    assert en.bounds is None
    with pytest.raises(ConfigError):
        en.within_bounds()


def test_lambda_theory():
    assert lambda_theory(2, q=1, A=1, omega=1.0) == pytest.approx(math.log(2))
    assert lambda_theory(100, omega="auto", base=HuberPseudo(1.345), skew=SkewSpec(0.0, 1.0, 1.0)) == pytest.approx(
        2.345 * math.sqrt(math.log(100)))
    with pytest.raises(ConfigError):
        lambda_theory(10, base=Gaussian())
    with pytest.raises(DomainError):
        lambda_theory(1, omega=1.0)
    with pytest.raises(ConfigError):
        lambda_theory(10, q=0.0, omega=1.0)
