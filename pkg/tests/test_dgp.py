import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepsdrf import dgp

# true_cadr(t=3, a=0.01, x_sum=0.1 at every step): quadrature of the clamped
# normal mean (0.1741174) and a 1e6-draw Monte Carlo run (0.17367, se ~0.0015)
CADR_FIXTURE_QUAD = 0.1741174
CADR_FIXTURE_MC = 0.17367


def test_zero_variance_gives_zero_covariates():
    X = dgp.gen_covariates(dgp.DgpConfig(n_patients=50, variance_v=0.0))
    assert np.all(X == 0.0)


def test_covariate_decay_example():
    # X(2) / X(0) = 1 / sqrt(1) / sqrt(2) ~ 0.70711
    X = dgp.gen_covariates(dgp.DgpConfig(n_patients=5, dim_d=3, seed=4))
    assert np.allclose(X[:, 2] / X[:, 0], 0.70711, atol=1e-5)


def test_covariate_decay_is_exact():
    X = dgp.gen_covariates(dgp.DgpConfig(n_patients=30, seed=1))
    for t in range(1, X.shape[1]):
        assert np.array_equal(X[:, t], X[:, t - 1] / np.sqrt(t))


def test_initial_variance():
    X = dgp.gen_covariates(dgp.DgpConfig(n_patients=100_000, dim_d=1, variance_v=0.5, seed=7))
    assert abs(X[:, 0, 0].var() - 0.5) < 0.01


def test_treatment_mean_without_confounding():
    X = dgp.gen_covariates(dgp.DgpConfig(n_patients=100_000, dim_d=2, seed=3))
    A = dgp.gen_treatment(X[:, :1], 0.0, seed=3)
    assert abs(A.mean() - 0.5) < 0.01


def test_treatment_mean_floor():
    cov = np.full((1, 1, 4), -5.0)
    assert dgp.treatment_mean(cov, 1.0)[0, 0] == 1e-3


def test_treatment_is_deterministic_and_nonnegative():
    X = dgp.gen_covariates(dgp.DgpConfig(n_patients=100, seed=2))
    a1 = dgp.gen_treatment(X, 0.5, seed=11)
    a2 = dgp.gen_treatment(X, 0.5, seed=11)
    assert np.array_equal(a1, a2)
    assert np.all(a1 >= 0)


@pytest.mark.parametrize(
    "a, s, expected",
    [(0.0, 3.0, 3.0), (1.0, 0.0, 1.0), (0.5, 2.0, 0.5 + 2.0 * math.exp(-1.0))],
)
def test_conditional_hazard_mean(a, s, expected):
    assert dgp.conditional_hazard_mean(a, s) == pytest.approx(expected, abs=1e-12)


def test_conditional_hazard_mean_value():
    assert dgp.conditional_hazard_mean(0.5, 2.0) == pytest.approx(1.23576, abs=1e-5)


def test_marginal_hazard_mean_examples():
    assert dgp.marginal_hazard_mean(0.0, 8) == 8.0
    assert dgp.marginal_hazard_mean(1.0, 8) == pytest.approx(1.015625, abs=1e-15)
    assert dgp.marginal_hazard_mean(1.0, 6) == pytest.approx(1.046875, abs=1e-15)


def test_marginal_hazard_mean_pole():
    with pytest.raises(ValueError):
        dgp.marginal_hazard_mean(-1.0, 4)


@pytest.mark.parametrize("a", [0.0, 0.25, 0.5, 1.0, 2.0])
@pytest.mark.parametrize("D", [4, 8])
def test_marginal_matches_monte_carlo_within_3se(a, D):
    rng = np.random.default_rng(100 + D)
    s = rng.exponential(1.0, size=(200_000, D)).sum(axis=1)
    h = dgp.conditional_hazard_mean(a, s)
    se = h.std() / math.sqrt(h.size)
    assert abs(h.mean() - dgp.marginal_hazard_mean(a, D)) < 3 * se


def test_zero_hazard_means_no_event():
    surv = dgp.survival_from_hazards(np.zeros((3, 13)))
    T = dgp.first_crossing(surv, np.array([0.2, 0.5, 0.9]), 13)
    assert np.all(surv == 1.0)
    assert np.all(T == 13)


def test_certain_hazard_means_event_at_zero():
    h = np.zeros((2, 13))
    h[:, 0] = 1.0
    surv = dgp.survival_from_hazards(h)
    assert np.all(dgp.first_crossing(surv, np.array([1e-9, 0.99]), 13) == 0)


def test_censoring_curve():
    c = dgp.censoring_curve(12, 30.0)
    assert c[0] == 1.0 and c[1] == 1.0
    assert c[12] == pytest.approx(math.exp(-math.log(12) / 30))
    assert np.all(np.diff(c) <= 0)


def test_panel_invariants():
    cfg = dgp.DgpConfig(n_patients=500, seed=5)
    p = dgp.simulate_panel(cfg)
    assert np.all(p.treatment >= 0)
    assert np.all(p.observed_time <= cfg.max_followup + 1)
    assert np.array_equal(p.event_flag == 1, p.event_time <= p.censor_time)
    assert p.event_time.max() <= cfg.max_followup + 1
    assert p.censor_time.max() <= cfg.max_followup


def test_panel_determinism():
    cfg = dgp.DgpConfig(n_patients=200, seed=9)
    a, b = dgp.simulate_panel(cfg), dgp.simulate_panel(cfg)
    for f in ("covariates", "treatment", "event_time", "censor_time", "event_flag"):
        assert np.array_equal(getattr(a, f), getattr(b, f))
    c = dgp.simulate_panel(cfg.with_seed(10))
    assert not np.array_equal(a.treatment, c.treatment)


def test_censoring_active_but_partial():
    cfg = dgp.DgpConfig(n_patients=20_000, seed=0)
    u = np.random.default_rng(0).uniform(size=cfg.n_patients)
    cens = dgp.first_crossing(np.broadcast_to(dgp.censoring_curve(12), (cfg.n_patients, 13)), u, 12)
    frac_censored = np.mean(cens < 12)
    assert 0.0 < frac_censored < 1.0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=15))
def test_survival_nonincreasing(h):
    s = dgp.survival_from_hazards(np.array(h))
    assert np.all(np.diff(s) <= 0)
    assert np.all((s >= 0) & (s <= 1))


def test_survival_rejects_invalid_hazard():
    with pytest.raises(ValueError):
        dgp.survival_from_hazards([0.2, 1.2])


def test_clamped_mean_closed_form_matches_mc():
    mu = np.array([-2.0, -0.3, 0.0, 0.4, 0.9, 1.5, 3.0])
    exact = dgp.clamped_normal_mean(mu)
    mc = dgp.clamped_normal_mean_mc(mu, draws=400_000, seed=1)
    assert np.allclose(exact, mc, atol=3e-3)


def test_true_cadr_fixture():
    path = np.full(4, 0.1)
    exact = dgp.true_cadr(3, 0.01, path, dgp.TruthOracle("exact"))
    assert exact == pytest.approx(CADR_FIXTURE_QUAD, abs=1e-6)
    assert abs(exact - CADR_FIXTURE_MC) < 3 * 0.0015
    mc = dgp.true_cadr(3, 0.01, path, dgp.TruthOracle("monte-carlo", 100_000, seed=3))
    assert mc == pytest.approx(CADR_FIXTURE_QUAD, abs=5e-3)


def test_true_cadr_saturated():
    # mean >= 1 + 5 sigma at every step
    path = np.full(13, 6.0)
    assert dgp.true_cadr(0, 0.0, path, dgp.TruthOracle("exact")) < 1e-6
    # mean <= -5 sigma at every step
    path = np.full(13, -5.5)
    vals = dgp.true_survival(0.0, path, dgp.TruthOracle("exact"))
    assert np.all(vals > 1 - 1e-5)


def test_true_cadr_rejects_late_t():
    with pytest.raises(ValueError):
        dgp.true_cadr(13, 0.1, np.zeros(13))


def test_continuous_outcome():
    cov = np.zeros((200_000, 3))
    y = dgp.gen_continuous_outcome(cov, np.zeros(200_000), seed=0)
    assert abs(y.mean()) < 0.01
    rng = np.random.default_rng(5)
    x = rng.exponential(1.0, size=(1_000_000, 6))
    y = dgp.gen_continuous_outcome(x, np.ones(1_000_000), seed=5)
    assert y.mean() == pytest.approx(1.046875, rel=0.01)


@pytest.mark.parametrize(
    "kw",
    [dict(n_patients=0), dict(dim_d=0), dict(variance_v=-1.0), dict(overlap_eta=1.5), dict(max_followup=0)],
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        dgp.DgpConfig(**kw)


def test_oracle_validation():
    with pytest.raises(ValueError):
        dgp.TruthOracle("monte-carlo", mc_draws=10)
    with pytest.raises(ValueError):
        dgp.TruthOracle("analytic")
