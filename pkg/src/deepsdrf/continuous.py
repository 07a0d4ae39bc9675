"""Continuous-outcome dose-response experiment: flexible vs linear GPS and outcome models.

Two worlds with covariate dimension ``D``:

* ``linear``: ``X ~ N(0, I)``, ``A | X ~ N(alpha + X beta, sigma^2)`` and
  ``Y = mu0 + A + c * g(A, X) + eps``, so a normal-linear GPS and an outcome
  model linear in ``(a, g)`` are both correctly specified. The marginal
  ``E_X g(a, X)`` is the normal density of ``A``, giving an exact ADR.
* ``misspecified``: ``X_j ~ Exp(1)``, exponential doses as in the survival
  simulation, ``Y(a) | X ~ N(a + s exp(-a s), 1)``; the ADR is
  ``a + D / (a + 1)^(D + 1)``.

The ADR estimate is ``mu_hat(a) = mean_i f(a, g_hat(a, x_i))`` over a test cohort.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import norm

from . import dgp, gps, nn
from .survival import GPS_FLOOR, Standardizer

VARIANTS = ("nn", "nn_linear", "linear")
WORLDS = ("linear", "misspecified")


@dataclass(frozen=True)
class ContinuousConfig:
    dim_d: int = 6
    n_patients: int = 10000
    replications: int = 3
    ensemble_m: int = 3
    n_eval_doses: int = 9
    eval_band: tuple = (15.0, 85.0)
    # linear world
    alpha: float = 0.5
    beta: float = 0.3
    sigma: float = 0.5
    mu0: float = 2.0
    c: float = 1.0
    # misspecified world
    overlap_eta: float = 0.5
    # networks
    optimizer: str = "adam"
    learning_rate: float = 0.01
    epochs: int = 30
    batch_size: int = 128
    num_basis_j: int = 45
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eval_band"] = list(self.eval_band)
        return d


@dataclass
class ContinuousData:
    x: np.ndarray  # [N, D]
    a: np.ndarray
    y: np.ndarray


def simulate_world(world: str, cfg: ContinuousConfig, seed: int) -> ContinuousData:
    rng = np.random.default_rng([seed, 11])
    N, D = cfg.n_patients, cfg.dim_d
    if world == "linear":
        x = rng.standard_normal((N, D))
        mean = cfg.alpha + cfg.beta * x.sum(axis=1)
        a = mean + cfg.sigma * rng.standard_normal(N)
        g = norm.pdf(a, loc=mean, scale=cfg.sigma)
        y = cfg.mu0 + a + cfg.c * g + rng.standard_normal(N)
        return ContinuousData(x, a, y)
    if world == "misspecified":
        x = rng.exponential(1.0, size=(N, D))
        a = rng.exponential(dgp.treatment_mean(x, cfg.overlap_eta))
        y = dgp.gen_continuous_outcome(x, a, seed)
        return ContinuousData(x, a, y)
    raise ValueError(f"unknown world {world!r}")


def true_adr(world: str, a, cfg: ContinuousConfig) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if world == "linear":
        sd = np.sqrt(cfg.sigma**2 + cfg.dim_d * cfg.beta**2)
        return cfg.mu0 + a + cfg.c * norm.pdf(a, loc=cfg.alpha, scale=sd)
    return dgp.marginal_hazard_mean(a, cfg.dim_d)


class LinearGps:
    """Normal GPS with mean from a single-linear-layer network and residual variance."""

    def __init__(self, net: nn.Network, scaler: Standardizer, sd: float):
        self.net, self.scaler, self.sd = net, scaler, sd

    @classmethod
    def fit(cls, x, a, cfg: nn.NetConfig):
        scaler = Standardizer.fit(x)
        xs = scaler.transform(x)[:, None, :]
        net = nn.Network(cfg)
        nn.train(net, xs, a[:, None], loss_kind="mse")
        resid = a - net.predict(xs)[:, 0]
        return cls(net, scaler, float(max(resid.std(), 1e-6)))

    def density(self, a, x):
        mean = self.net.predict(self.scaler.transform(x)[:, None, :])[:, 0]
        return norm.pdf(a, loc=mean, scale=self.sd)


class CdeGps:
    def __init__(self, ens: gps.GpsEnsemble):
        self.ens = ens

    @classmethod
    def fit(cls, x, a, cfg: nn.NetConfig, m: int):
        scaler = Standardizer.fit(x)
        xs = scaler.transform(x)[:, None, :]
        ens = gps.fit_gps_arrays(xs, np.ones((len(a), 1)), a, None, cfg, m)
        ens.meta["scaler"] = scaler.to_dict()
        return cls(ens)

    def density(self, a, x):
        scaler = Standardizer.from_dict(self.ens.meta["scaler"])
        xs = scaler.transform(x)[:, None, :]
        return self.ens.evaluator(xs).density(a)


def _features(a, g, gps_feature):
    g = np.asarray(g, dtype=float)
    if gps_feature == "log":
        g = np.log(g + GPS_FLOOR)
    return np.stack([np.asarray(a, dtype=float), g], axis=-1)


class OutcomeRegressor:
    """Ensemble of regressors of ``y`` on ``(a, g)``, or ``(a, log g)`` with ``gps_feature="log"``."""

    def __init__(self, nets, scaler: Standardizer, y_mean: float, y_sd: float, gps_feature: str):
        self.nets, self.scaler, self.y_mean, self.y_sd = nets, scaler, y_mean, y_sd
        self.gps_feature = gps_feature

    @classmethod
    def fit(cls, a, g, y, cfg: nn.NetConfig, m: int, gps_feature: str = "raw"):
        feats = _features(a, g, gps_feature)
        scaler = Standardizer.fit(feats)
        xs = scaler.transform(feats)[:, None, :]
        y_mean, y_sd = float(y.mean()), float(y.std() or 1.0)
        target = ((y - y_mean) / y_sd)[:, None]
        nets = []
        for k in range(m):
            net = nn.Network(cfg.replace(seed=cfg.seed + k))
            nn.train(net, xs, target, loss_kind="mse")
            nets.append(net)
        return cls(nets, scaler, y_mean, y_sd, gps_feature)

    def predict(self, a, g):
        xs = self.scaler.transform(_features(a, g, self.gps_feature))[:, None, :]
        out = np.mean([net.predict(xs)[:, 0] for net in self.nets], axis=0)
        return self.y_mean + self.y_sd * out


def _net_cfg(cfg: ContinuousConfig, n_features: int, n_outputs: int, linear: bool, seed: int):
    common = dict(
        n_features=n_features, n_outputs=n_outputs, history_u=1, output_head="vector",
        optimizer=cfg.optimizer, learning_rate=cfg.learning_rate, epochs=cfg.epochs,
        batch_size=cfg.batch_size, seed=seed,
    )
    if linear:
        return nn.NetConfig(dense_layers=0, recurrent_units=0, **common)
    return nn.NetConfig(dense_layers=2, dense_units=max(4, n_features), recurrent_units=0, **common)


def estimate_adr(gps_model, outcome: OutcomeRegressor, doses, x) -> np.ndarray:
    return np.array([outcome.predict(np.full(len(x), a), gps_model.density(a, x)).mean() for a in doses])


def run_world(world: str, cfg: ContinuousConfig, rep: int) -> dict:
    """Bias and squared error of every variant for one replication."""
    seed = cfg.seed + rep
    train = simulate_world(world, cfg, 2 * seed)
    test = simulate_world(world, cfg, 2 * seed + 1)
    doses = np.percentile(test.a, np.linspace(*cfg.eval_band, cfg.n_eval_doses))
    truth = true_adr(world, doses, cfg)
    D = cfg.dim_d
    base = 1000 * seed
    gps_nn = CdeGps.fit(train.x, train.a, _net_cfg(cfg, D, cfg.num_basis_j, False, base),
                        cfg.ensemble_m)
    gps_lin = LinearGps.fit(train.x, train.a, _net_cfg(cfg, D, 1, True, base + 100))
    g_nn = gps_nn.density(train.a, train.x)
    g_lin = gps_lin.density(train.a, train.x)
    models = {
        "nn": (gps_nn, OutcomeRegressor.fit(train.a, g_nn, train.y, _net_cfg(cfg, 2, 1, False, base + 200),
                                            cfg.ensemble_m)),
        "nn_linear": (gps_lin, OutcomeRegressor.fit(train.a, g_lin, train.y,
                                                    _net_cfg(cfg, 2, 1, False, base + 300), cfg.ensemble_m)),
        "linear": (gps_lin, OutcomeRegressor.fit(train.a, g_lin, train.y, _net_cfg(cfg, 2, 1, True, base + 400),
                                                 cfg.ensemble_m)),
    }
    out = {}
    for name, (g_model, o_model) in models.items():
        est = estimate_adr(g_model, o_model, doses, test.x)
        out[name] = {
            "bias": float(np.mean(np.abs((est - truth) / truth))),
            "rmse": float(np.mean((est - truth) ** 2)),
            "rmse_sqrt": float(np.sqrt(np.mean((est - truth) ** 2))),
        }
    return out
