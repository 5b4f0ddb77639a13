import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special, stats

from oracles import gamma_inverse_cdf_sample
from stochmapf.delay_model import (
    DomainError,
    NoConvergence,
    GammaParams,
    NonPositiveObservation,
    PosteriorState,
    PriorConfig,
    digamma,
    inverse_digamma,
    map_estimate,
    map_residual,
    moments_to_params,
    observe,
    observe_many,
    prior_to_pq,
    sample_delay,
    trigamma,
)

# frozen with mpmath at 30 digits
PSI_1 = -0.577215664901532860606512090082
PSI_HALF = -1.963510026021423479440976333
PSI_2_5 = 0.703156640645243187225690333668
PSI_1E_3 = -1000.57557193181027965475671066
PSI_100 = 4.60016185273808740019860558558


@pytest.mark.parametrize("x, ref", [(1.0, PSI_1), (0.5, PSI_HALF), (2.5, PSI_2_5), (1e-3, PSI_1E_3), (100.0, PSI_100)])
def test_digamma_reference_values(x, ref):
    assert abs(digamma(x) - ref) <= 1e-10 * max(1.0, abs(ref))


def test_digamma_closed_form_at_half():
    assert digamma(0.5) == pytest.approx(-np.euler_gamma - 2 * math.log(2), abs=1e-12)


@settings(max_examples=300, deadline=None)
@given(st.floats(min_value=1e-4, max_value=1e6))
def test_digamma_matches_mpmath(x):
    assert abs(digamma(x) - float(mpmath.digamma(x))) <= 1e-10 * max(1.0, abs(digamma(x)))


@settings(max_examples=200, deadline=None)
@given(st.floats(min_value=1e-3, max_value=1e4))
def test_digamma_recurrence(x):
    assert digamma(x + 1) - digamma(x) == pytest.approx(1 / x, rel=1e-9, abs=1e-10)


@settings(max_examples=200, deadline=None)
@given(st.floats(min_value=1e-3, max_value=1e4))
def test_trigamma_matches_scipy(x):
    assert trigamma(x) == pytest.approx(float(special.polygamma(1, x)), rel=1e-10)


@pytest.mark.parametrize("x", [0.0, -1.0, -0.5])
def test_digamma_domain(x):
    with pytest.raises(DomainError):
        digamma(x)


@pytest.mark.parametrize("x", [2.5, 1.0, 1e-3, 0.37, 42.0, 1e5])
def test_inverse_digamma_round_trip(x):
    assert inverse_digamma(digamma(x)) == pytest.approx(x, rel=1e-8, abs=1e-8)


@settings(max_examples=300, deadline=None)
@given(st.floats(min_value=-1e3, max_value=20.0))
def test_inverse_digamma_residual(y):
    x = inverse_digamma(y)
    assert x > 0
    assert abs(float(special.digamma(x)) - y) <= 1e-10 * max(1.0, abs(y))


@settings(max_examples=100, deadline=None)
@given(st.floats(min_value=-50, max_value=10), st.floats(min_value=1e-3, max_value=5))
def test_inverse_digamma_monotone(y, gap):
    assert inverse_digamma(y) < inverse_digamma(y + gap)


def test_moments_to_params_examples():
    p = moments_to_params(3.0, 0.1)
    assert p.shape == pytest.approx(90.0) and p.scale == pytest.approx(1 / 30)
    p = moments_to_params(9.0, 0.4)
    assert p.shape == pytest.approx(202.5) and p.scale == pytest.approx(0.4 / 9)


def test_moments_literal_flag():
    p = moments_to_params(3.0, 0.1, literal=True)
    assert p.shape == pytest.approx(0.9) and p.scale == pytest.approx(1 / 30)


@settings(max_examples=100, deadline=None)
@given(st.floats(min_value=0.01, max_value=100), st.floats(min_value=0.001, max_value=10))
def test_moments_round_trip(m, v):
    p = moments_to_params(m, v)
    assert p.mean == pytest.approx(m, rel=1e-12)
    assert p.variance == pytest.approx(v, rel=1e-12)
    back = moments_to_params(p.mean, p.variance)
    assert back.shape == pytest.approx(p.shape, rel=1e-12) and back.scale == pytest.approx(p.scale, rel=1e-12)


def test_gamma_params_positive():
    with pytest.raises(ValueError):
        GammaParams(0.0, 1.0)


def test_sample_delay_moments():
    rng = np.random.default_rng(1)
    params = GammaParams(2.0, 0.5)
    x = np.array([sample_delay(params, rng) for _ in range(200_000)])
    assert (x > 0).all()
    n = len(x)
    se_mean = math.sqrt(params.variance / n)
    assert abs(x.mean() - 1.0) <= 3 * se_mean
    # variance of the sample variance for a gamma: (m4 - sigma^4) / n
    a, b = params.shape, params.scale
    m4 = 3 * a * (a + 2) * b ** 4
    se_var = math.sqrt((m4 - params.variance ** 2) / n)
    assert abs(x.var() - 0.5) <= 3 * se_var


def test_sample_delay_exponential_case():
    rng = np.random.default_rng(2)
    x = [sample_delay(GammaParams(1.0, 0.7), rng) for _ in range(5000)]
    assert stats.kstest(x, "expon", args=(0, 0.7)).pvalue > 0.01


def test_sample_delay_deterministic():
    a = [sample_delay(GammaParams(3.0, 0.4), np.random.default_rng(9)) for _ in range(3)]
    b = [sample_delay(GammaParams(3.0, 0.4), np.random.default_rng(9)) for _ in range(3)]
    assert a == b


def test_prior_to_pq_examples():
    log_p, q = prior_to_pq(PriorConfig(1.0, 0.2, 0.1, 0.1))
    assert q == pytest.approx(0.02)
    # fixed-point form: + s ln b_prior
    assert log_p == pytest.approx(0.1 * PSI_1 + 0.1 * math.log(0.2), abs=1e-12)
    log_p_lit, _ = prior_to_pq(PriorConfig(1.0, 0.2, 0.1, 0.1), literal=True)
    assert log_p_lit == pytest.approx(0.1 * PSI_1 - 0.1 * math.log(0.2), abs=1e-12)
    log_p, q = prior_to_pq(PriorConfig(1.0, 1.0, 1.0, 1.0))
    assert q == 1.0 and log_p == pytest.approx(PSI_1, abs=1e-12)


def test_literal_prior_has_no_mode_at_prior_point():
    prior = PriorConfig(1.0, 0.2, 0.1, 0.1)
    state = PosteriorState.from_prior(prior, literal=True)
    assert abs(map_residual(state, 0.2)) > 0.1
    # with r == s the residual tends to ln p - r ln(q/s) as b -> 0; positive here, so no root
    assert state.log_p - state.r * math.log(state.q / state.s) > 0
    with pytest.raises(NoConvergence):
        map_estimate(state)


def test_observe_arithmetic():
    s0 = PosteriorState.from_prior(PriorConfig())
    s = observe(observe(s0, 1.0), 2.0)
    assert s.q - s0.q == pytest.approx(3.0)
    assert (s.r - s0.r, s.s - s0.s, s.n_obs) == (2, 2, 2)
    assert s.log_p - s0.log_p == pytest.approx(math.log(2))
    assert observe(s0, 1.0).log_p == s0.log_p
    for bad in (0.0, -1.0):
        with pytest.raises(NonPositiveObservation):
            observe(s0, bad)


def test_observe_order_independent():
    rng = np.random.default_rng(3)
    xs = rng.gamma(3.0, 0.4, size=500)
    s0 = PosteriorState.from_prior(PriorConfig())
    a = b = s0
    for x in sorted(xs):
        a = observe(a, x)
    for x in rng.permutation(xs):
        b = observe(b, x)
    c = observe_many(s0, xs)
    for other in (b, c):
        assert other.log_p == pytest.approx(a.log_p, abs=1e-9)
        assert other.q == pytest.approx(a.q, abs=1e-9)
        assert (other.r, other.s, other.n_obs) == (a.r, a.s, a.n_obs)


def _random_posterior(rng):
    # r >= s keeps the profile residual monotone, so the mode is unique
    s_ = rng.uniform(0.05, 2)
    prior = PriorConfig(rng.uniform(0.2, 5), rng.uniform(0.05, 2), s_ + rng.uniform(0, 2), s_)
    truth = GammaParams(rng.uniform(0.5, 200), rng.uniform(0.01, 1))
    n = int(rng.integers(0, 300))
    return observe_many(PosteriorState.from_prior(prior), rng.gamma(truth.shape, truth.scale, size=n))


def test_map_stationarity_random_posteriors():
    rng = np.random.default_rng(4)
    for _ in range(100):
        s = _random_posterior(rng)
        est = map_estimate(s)
        assert abs(map_residual(s, est.scale)) <= 1e-10
        assert abs(float(special.digamma(est.shape)) - (s.log_p - s.s * math.log(est.scale)) / s.r) <= 1e-8
        assert abs(est.scale - s.q / (est.shape * s.s)) <= 1e-8 * est.scale


def test_map_is_posterior_mode_numerically():
    # independent check: maximize the log density directly
    rng = np.random.default_rng(5)
    s = observe_many(PosteriorState.from_prior(PriorConfig()), rng.gamma(3.0, 0.4, size=50))
    est = map_estimate(s)

    def logpdf(a, b):
        return (a - 1) * s.log_p - s.q / b - s.r * float(special.gammaln(a)) - a * s.s * math.log(b)

    best = logpdf(est.shape, est.scale)
    for da in (-1e-3, 1e-3):
        for db in (-1e-5, 1e-5):
            assert logpdf(est.shape * (1 + da), est.scale * (1 + db)) <= best + 1e-12


def test_prior_fixed_point():
    rng = np.random.default_rng(6)
    for _ in range(50):
        s_ = rng.uniform(0.01, 3)
        prior = PriorConfig(rng.uniform(0.1, 10), rng.uniform(0.01, 5), s_ + rng.uniform(0, 3), s_)
        est = map_estimate(PosteriorState.from_prior(prior))
        assert est.shape == pytest.approx(prior.a_prior, abs=1e-8)
        assert est.scale == pytest.approx(prior.b_prior, abs=1e-8)


@pytest.mark.parametrize("shape, scale, tol", [(3.0, 0.4, 0.05), (90.0, 1 / 30, None)])
def test_map_consistency_with_independent_sampler(shape, scale, tol):
    rng = np.random.default_rng(7)
    xs = gamma_inverse_cdf_sample(shape, scale, 10_000, rng)
    est = map_estimate(observe_many(PosteriorState.from_prior(PriorConfig()), xs))
    if tol is None:
        assert est.mean == pytest.approx(shape * scale, rel=0.02)
    else:
        assert est.shape == pytest.approx(shape, rel=tol)
        assert est.scale == pytest.approx(scale, rel=tol)


def test_rmse_shrinks_with_observations():
    errs = []
    for n in (10, 100, 1000, 10_000):
        se = []
        for seed in range(20):
            rng = np.random.default_rng(seed)
            xs = gamma_inverse_cdf_sample(3.0, 0.4, n, rng)
            est = map_estimate(observe_many(PosteriorState.from_prior(PriorConfig()), xs))
            se.append((est.shape - 3.0) ** 2)
        errs.append(math.sqrt(np.mean(se)))
    assert all(b <= a for a, b in zip(errs, errs[1:]))


def test_r_below_s_returns_local_mode():
    rng = np.random.default_rng(8)
    seen_mode = seen_saddle = 0
    for _ in range(200):
        prior = PriorConfig(rng.uniform(0.1, 10), rng.uniform(0.01, 5), rng.uniform(0.01, 1), rng.uniform(1, 3))
        state = PosteriorState.from_prior(prior)
        prior_is_mode = prior.r * prior.a_prior * trigamma(prior.a_prior) > prior.s
        try:
            est = map_estimate(state)
        except NoConvergence:
            assert not prior_is_mode
            continue
        assert abs(map_residual(state, est.scale)) <= 1e-9
        # second-order condition along the profile: the residual must be increasing
        assert prior.r * est.shape * trigamma(est.shape) > prior.s
        if prior_is_mode:
            seen_mode += 1
            assert est.shape == pytest.approx(prior.a_prior, abs=1e-8)
        else:
            seen_saddle += 1
            assert est.shape < prior.a_prior
    assert seen_mode and seen_saddle
