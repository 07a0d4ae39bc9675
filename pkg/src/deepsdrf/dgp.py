"""Synthetic longitudinal cohorts with known survival dose response.

Covariates start at ``X(0) ~ N(0, V)`` and decay as ``X(t) = X(t-1) / sqrt(t)``.
Doses are exponential with mean ``max(eta * mean_d X(t) + (1 - eta) * 0.5, 1e-3)``.
Per-step hazards are ``N(a + s * exp(-a * s), 1)`` with ``s = sum_d X(t)_d``,
clamped to ``[0, 1]``.

Random streams are derived from ``(seed, stream_id)`` so covariates, doses,
hazard noise and the uniforms used for event/censor times are independent and
reproducible.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import ndtr

TREATMENT_FLOOR = 1e-3

_STREAM_COVARIATES = 0
_STREAM_TREATMENT = 1
_STREAM_HAZARD = 2
_STREAM_EVENT_U = 3
_STREAM_CENSOR_U = 4
_STREAM_CONTINUOUS = 5


@dataclass(frozen=True)
class DgpConfig:
    n_patients: int = 3000
    dim_d: int = 8
    variance_v: float = 0.5
    overlap_eta: float = 0.5
    max_followup: int = 12
    censor_lambda: float = 30.0
    history_h: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.n_patients < 1:
            raise ValueError("n_patients must be >= 1")
        if self.dim_d < 1:
            raise ValueError("dim_d must be >= 1")
        if self.variance_v < 0:
            raise ValueError("variance_v must be >= 0")
        if not 0.0 <= self.overlap_eta <= 1.0:
            raise ValueError("overlap_eta must lie in [0, 1]")
        if self.max_followup < 1:
            raise ValueError("max_followup must be >= 1")
        if self.censor_lambda <= 0:
            raise ValueError("censor_lambda must be > 0")
        if self.history_h < 1:
            raise ValueError("history_h must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    def with_seed(self, seed: int) -> "DgpConfig":
        return DgpConfig(**{**asdict(self), "seed": int(seed)})


@dataclass
class PatientPanel:
    """Cohort arrays. Time runs over steps ``0..max_followup``.

    ``covariates`` is ``[N, T, D]``, ``treatment`` ``[N, T]`` with
    ``T = max_followup + 1``. ``event_time == max_followup + 1`` means no event.
    """

    covariates: np.ndarray
    treatment: np.ndarray
    event_time: np.ndarray
    censor_time: np.ndarray
    event_flag: np.ndarray
    max_followup: int

    @property
    def observed_time(self) -> np.ndarray:
        return np.minimum(self.event_time, self.censor_time)

    @property
    def n_patients(self) -> int:
        return self.covariates.shape[0]

    @property
    def n_steps(self) -> int:
        return self.covariates.shape[1]

    @property
    def dim_d(self) -> int:
        return self.covariates.shape[2]

    def x_sum(self) -> np.ndarray:
        """Covariate sum per patient and step, ``[N, T]``."""
        return self.covariates.sum(axis=2)

    def subset(self, idx) -> "PatientPanel":
        return PatientPanel(
            self.covariates[idx],
            self.treatment[idx],
            self.event_time[idx],
            self.censor_time[idx],
            self.event_flag[idx],
            self.max_followup,
        )


@dataclass(frozen=True)
class TruthOracle:
    """How the true clamped hazard expectation is computed.

    ``monte-carlo`` averages ``clip(N(mu, 1), 0, 1)`` over ``mc_draws`` noise
    draws; ``exact`` uses the closed form of the same expectation.
    """

    mode: str = "monte-carlo"
    mc_draws: int = 100_000
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("monte-carlo", "exact"):
            raise ValueError(f"unknown oracle mode {self.mode!r}")
        if self.mode == "monte-carlo" and self.mc_draws < 1000:
            raise ValueError("mc_draws must be >= 1000 in monte-carlo mode")


def _rng(seed, stream):
    return np.random.default_rng([int(seed), stream])


def gen_covariates(cfg: DgpConfig) -> np.ndarray:
    rng = _rng(cfg.seed, _STREAM_COVARIATES)
    T = cfg.max_followup + 1
    X = np.empty((cfg.n_patients, T, cfg.dim_d))
    X[:, 0] = rng.normal(0.0, np.sqrt(cfg.variance_v), size=(cfg.n_patients, cfg.dim_d))
    for t in range(1, T):
        X[:, t] = X[:, t - 1] / np.sqrt(t)
    return X


def treatment_mean(covariates: np.ndarray, overlap_eta: float) -> np.ndarray:
    """Exponential mean parameter per patient and step."""
    lin = overlap_eta * covariates.mean(axis=-1) + (1.0 - overlap_eta) * 0.5
    return np.maximum(lin, TREATMENT_FLOOR)


def treatment_density(a, covariates, overlap_eta: float) -> np.ndarray:
    """True conditional density of dose ``a`` given the covariates at that step."""
    mean = treatment_mean(np.asarray(covariates, dtype=float), overlap_eta)
    a = np.asarray(a, dtype=float)
    return np.where(a >= 0, np.exp(-a / mean) / mean, 0.0)


def gen_treatment(covariates: np.ndarray, overlap_eta: float, seed: int) -> np.ndarray:
    rng = _rng(seed, _STREAM_TREATMENT)
    return rng.exponential(treatment_mean(covariates, overlap_eta))


def conditional_hazard_mean(a, x_sum):
    a = np.asarray(a, dtype=float)
    x_sum = np.asarray(x_sum, dtype=float)
    with np.errstate(over="ignore"):
        out = a + x_sum * np.exp(-a * x_sum)
    return out if out.ndim else float(out)


def marginal_hazard_mean(a, dim_d: int):
    """Hazard mean with the covariates integrated out under ``X_j ~ Exp(1)``."""
    a = np.asarray(a, dtype=float)
    if np.any(a <= -1.0):
        raise ValueError("marginal hazard mean has a pole at a = -1; need a > -1")
    out = a + dim_d / (a + 1.0) ** (dim_d + 1)
    return out if out.ndim else float(out)


def _int_ndtr(y):
    # antiderivative of the standard normal cdf
    return y * ndtr(y) + np.exp(-0.5 * y * y) / np.sqrt(2.0 * np.pi)


def clamped_normal_mean(mu, sigma: float = 1.0):
    """``E[clip(N(mu, sigma^2), 0, 1)]`` in closed form."""
    mu = np.asarray(mu, dtype=float)
    out = sigma * (_int_ndtr(mu / sigma) - _int_ndtr((mu - 1.0) / sigma))
    out = np.clip(out, 0.0, 1.0)
    return out if out.ndim else float(out)


def clamped_normal_mean_mc(mu, draws: int = 100_000, seed: int = 0, chunk: int = 2_000_000):
    """Monte Carlo estimate of :func:`clamped_normal_mean` (unit noise)."""
    mu = np.asarray(mu, dtype=float)
    flat = mu.ravel()
    rng = np.random.default_rng(seed)
    out = np.empty(flat.size)
    per = max(1, chunk // draws)
    for i in range(0, flat.size, per):
        m = flat[i : i + per]
        z = rng.standard_normal((m.size, draws))
        out[i : i + per] = np.clip(m[:, None] + z, 0.0, 1.0).mean(axis=1)
    out = out.reshape(mu.shape)
    return out if out.ndim else float(out)


def survival_from_hazards(hazards) -> np.ndarray:
    """``S(t) = prod_{j <= t} (1 - h(j))`` along the last axis."""
    h = np.asarray(hazards, dtype=float)
    if np.any(h < 0) or np.any(h > 1) or np.any(~np.isfinite(h)):
        raise ValueError("hazards must lie in [0, 1]")
    return np.cumprod(1.0 - h, axis=-1)


def first_crossing(curve: np.ndarray, u: np.ndarray, sentinel: int) -> np.ndarray:
    """First index t with ``curve[..., t] < u``; ``sentinel`` when none."""
    below = curve < u[..., None]
    hit = below.any(axis=-1)
    return np.where(hit, below.argmax(axis=-1), sentinel)


def censoring_curve(max_followup: int, censor_lambda: float = 30.0) -> np.ndarray:
    """``C(t) = exp(-log(t) / lambda)`` for ``t = 0..max_followup``; ``C(0) = 1``."""
    t = np.arange(max_followup + 1, dtype=float)
    out = np.ones_like(t)
    out[1:] = np.exp(-np.log(t[1:]) / censor_lambda)
    return out


def sample_hazards(covariates: np.ndarray, treatment: np.ndarray, seed: int) -> np.ndarray:
    rng = _rng(seed, _STREAM_HAZARD)
    mu = conditional_hazard_mean(treatment, covariates.sum(axis=-1))
    return np.clip(mu + rng.standard_normal(mu.shape), 0.0, 1.0)


def gen_outcomes(covariates: np.ndarray, treatment: np.ndarray, cfg: DgpConfig):
    """Returns ``(event_time, censor_time, event_flag)``."""
    n = covariates.shape[0]
    hazards = sample_hazards(covariates, treatment, cfg.seed)
    surv = survival_from_hazards(hazards)
    u_event = _rng(cfg.seed, _STREAM_EVENT_U).uniform(size=n)
    event_time = first_crossing(surv, u_event, cfg.max_followup + 1)
    u_censor = _rng(cfg.seed, _STREAM_CENSOR_U).uniform(size=n)
    cens = censoring_curve(cfg.max_followup, cfg.censor_lambda)
    censor_time = first_crossing(np.broadcast_to(cens, surv.shape), u_censor, cfg.max_followup)
    event_flag = (event_time <= censor_time).astype(np.int64)
    return event_time.astype(np.int64), censor_time.astype(np.int64), event_flag


def simulate_panel(cfg: DgpConfig) -> PatientPanel:
    X = gen_covariates(cfg)
    A = gen_treatment(X, cfg.overlap_eta, cfg.seed)
    T, C, Y = gen_outcomes(X, A, cfg)
    return PatientPanel(X, A, T, C, Y, cfg.max_followup)


def true_hazards(a, x_sum, oracle: TruthOracle = TruthOracle()) -> np.ndarray:
    """Expected clamped hazard for dose ``a`` and covariate sums ``x_sum``."""
    mu = conditional_hazard_mean(a, x_sum)
    if oracle.mode == "exact":
        return clamped_normal_mean(mu)
    return clamped_normal_mean_mc(mu, oracle.mc_draws, oracle.seed)


def true_survival(a, x_sum_path, oracle: TruthOracle = TruthOracle()) -> np.ndarray:
    """True survival ``S(t)`` for ``t = 0..T-1`` with the dose held fixed at ``a``.

    ``x_sum_path`` is ``[..., T]``; ``a`` broadcasts against its leading axes.
    """
    x_sum_path = np.asarray(x_sum_path, dtype=float)
    a = np.asarray(a, dtype=float)[..., None]
    return np.cumprod(1.0 - true_hazards(a, x_sum_path, oracle), axis=-1)


def true_cadr(t: int, a, x_sum_path, oracle: TruthOracle = TruthOracle()):
    x_sum_path = np.asarray(x_sum_path, dtype=float)
    if t >= x_sum_path.shape[-1]:
        raise ValueError(f"t={t} beyond max follow-up {x_sum_path.shape[-1] - 1}")
    out = true_survival(a, x_sum_path[..., : t + 1], oracle)[..., t]
    return out if np.ndim(out) else float(out)


def gen_continuous_outcome(covariates: np.ndarray, treatment, seed: int) -> np.ndarray:
    """``Y(a) | X ~ N(a + s * exp(-a * s), 1)`` with ``s`` the covariate sum."""
    rng = _rng(seed, _STREAM_CONTINUOUS)
    mu = conditional_hazard_mean(treatment, np.asarray(covariates).sum(axis=-1))
    mu = np.asarray(mu, dtype=float)
    return mu + rng.standard_normal(mu.shape)
