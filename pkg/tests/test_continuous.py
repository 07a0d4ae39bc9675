import numpy as np
import pytest
from scipy.stats import norm

from deepsdrf import continuous as cont
from deepsdrf import dgp


CFG = cont.ContinuousConfig(n_patients=3000, epochs=20, ensemble_m=1, replications=1)


def test_linear_world_truth_matches_monte_carlo():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((400_000, CFG.dim_d))
    mean = CFG.alpha + CFG.beta * x.sum(axis=1)
    for a in (-0.5, 0.5, 1.4):
        mc = CFG.mu0 + a + CFG.c * norm.pdf(a, loc=mean, scale=CFG.sigma).mean()
        assert cont.true_adr("linear", a, CFG) == pytest.approx(mc, abs=2e-3)


def test_misspecified_truth_is_marginal_hazard_mean():
    a = np.array([0.1, 0.5, 1.0])
    assert np.allclose(cont.true_adr("misspecified", a, CFG), dgp.marginal_hazard_mean(a, CFG.dim_d))


def test_simulate_world_shapes_and_determinism():
    for world in cont.WORLDS:
        d1 = cont.simulate_world(world, CFG, 3)
        d2 = cont.simulate_world(world, CFG, 3)
        assert d1.x.shape == (CFG.n_patients, CFG.dim_d) and d1.a.shape == d1.y.shape == (CFG.n_patients,)
        assert np.array_equal(d1.y, d2.y)
    with pytest.raises(ValueError):
        cont.simulate_world("quadratic", CFG, 0)


def test_linear_gps_recovers_normal_density():
    d = cont.simulate_world("linear", CFG, 1)
    cfg = cont._net_cfg(CFG, CFG.dim_d, 1, True, 0).replace(epochs=40)
    g = cont.LinearGps.fit(d.x, d.a, cfg)
    assert g.sd == pytest.approx(CFG.sigma, rel=0.05)
    true = norm.pdf(d.a[:500], loc=CFG.alpha + CFG.beta * d.x[:500].sum(axis=1), scale=CFG.sigma)
    assert np.mean(np.abs(g.density(d.a[:500], d.x[:500]) - true)) < 0.03


def test_linear_outcome_model_is_exact_on_noise_free_linear_data():
    rng = np.random.default_rng(2)
    a, g = rng.normal(size=2000), rng.uniform(0, 1, 2000)
    y = 1.0 + 2.0 * a - 0.5 * g
    cfg = cont._net_cfg(CFG, 2, 1, True, 0).replace(epochs=100, learning_rate=0.05)
    model = cont.OutcomeRegressor.fit(a, g, y, cfg, 1)
    assert np.max(np.abs(model.predict(a[:50], g[:50]) - y[:50])) < 1e-3


def test_log_feature_option():
    f = cont._features([1.0], [0.0], "log")
    assert f[0, 1] == pytest.approx(np.log(1e-3))


def test_run_world_reports_every_variant():
    small = cont.ContinuousConfig(n_patients=300, epochs=2, ensemble_m=1, n_eval_doses=3)
    for world in cont.WORLDS:
        res = cont.run_world(world, small, 0)
        assert set(res) == set(cont.VARIANTS)
        for row in res.values():
            assert row["bias"] >= 0 and row["rmse"] == pytest.approx(row["rmse_sqrt"] ** 2)
