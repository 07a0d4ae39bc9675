"""Experiment orchestration: replicated fits, metrics against the truth oracle,
stress bands, recommendation evaluation and the continuous-outcome experiment.

One replication fits the GPS and both outcome ensembles once on a training
cohort and evaluates on an independent test cohort. Replication ``r`` of a
scenario uses ``seed_r = cfg.seed + r``; the training cohort is simulated with
seed ``2 * seed_r`` and the test cohort with ``2 * seed_r + 1``.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import continuous, dgp, gps, recommend, survival
from .metrics import metric_bias, metric_coverage, metric_rmse, metric_rmse_sqrt, percentile_ci

logger = logging.getLogger(__name__)

MODELS = ("deepsdrf", "snn")
BANDS = ("center", "low", "high")
POLICIES = ("original", "deepsdrf_rs", "deepsdrf_rl", "snn_rs", "snn_rl")
REPORT_TIMES = (1, 6, 12)

# the grid varied one factor at a time around the default scenario
PAPER_GRID = {
    "variance_v": [0.5, 1.0, 2.0],
    "dim_d": [4, 8, 20, 40],
    "overlap_eta": [0.1, 0.5, 1.0],
    "n_patients": [1000, 3000, 5000, 10000],
    "history_h": [1, 3, 6],
}


@dataclass
class ExperimentConfig:
    dgp: dgp.DgpConfig = field(default_factory=dgp.DgpConfig)
    replications: int = 10
    ensemble_m: int = 5
    eval_band: tuple = (15.0, 85.0)
    n_eval_doses: int = 5
    stress_low: tuple = (2.0, 7.0, 12.0)
    stress_high: tuple = (88.0, 93.0, 98.0)
    seed: int = 0
    # networks
    optimizer: str = "adam"
    learning_rate: float = 0.01
    epochs: int = 50
    batch_size: int = 128
    dense_layers: int = 2
    recurrent_units: int = 8
    basis_kind: str = "cosine"
    num_basis_j: int = 45
    history_u: int = 1
    gps_feature: str = "log"
    # truth
    truth_mode: str = "exact"
    mc_draws: int = 100_000
    # recommendation
    n_levels: int = 20
    n_draws: int = 50
    n_state_bins: int = 10
    rl_alpha: float = 0.05
    rl_gamma: float = 0.99
    rl_iters: int = 50
    rl_sweeps: int = 5
    # scenario grid: parameter -> values, varied one at a time
    grid: dict = field(default_factory=dict)
    fail_fraction: float = 0.2

    def __post_init__(self):
        if isinstance(self.dgp, dict):
            self.dgp = dgp.DgpConfig(**self.dgp)
        self.eval_band = tuple(float(v) for v in self.eval_band)
        self.stress_low = tuple(float(v) for v in self.stress_low)
        self.stress_high = tuple(float(v) for v in self.stress_high)
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if self.ensemble_m < 1:
            raise ValueError("ensemble_m must be >= 1")
        lo, hi = self.eval_band
        if not (0.0 <= lo < hi <= 100.0):
            raise ValueError("eval_band must satisfy 0 <= lo < hi <= 100")
        for k in self.grid:
            if k not in {f.name for f in fields(dgp.DgpConfig)}:
                raise ValueError(f"grid key {k!r} is not a DgpConfig field")
        # validate eagerly so a bad config fails before any fitting
        dgp.TruthOracle(self.truth_mode, self.mc_draws)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dgp"] = self.dgp.to_dict()
        for k in ("eval_band", "stress_low", "stress_high"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def oracle(self) -> dgp.TruthOracle:
        return dgp.TruthOracle(self.truth_mode, self.mc_draws, self.seed)

    def scenarios(self) -> list:
        """Default scenario first, then one-at-a-time variations from ``grid``."""
        out = [self.dgp]
        for key, values in self.grid.items():
            for v in values:
                sc = replace(self.dgp, **{key: v})
                if sc not in out:
                    out.append(sc)
        return out


def config_hash(cfg: ExperimentConfig, scenario: dgp.DgpConfig) -> str:
    """Stable hash of everything that affects a scenario's numbers."""
    d = cfg.to_dict()
    d.pop("grid")
    d["dgp"] = scenario.to_dict()
    blob = json.dumps(d, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# -- one replication -----------------------------------------------------------


def _net_overrides(cfg: ExperimentConfig) -> dict:
    return dict(
        optimizer=cfg.optimizer, learning_rate=cfg.learning_rate, epochs=cfg.epochs,
        batch_size=cfg.batch_size, dense_layers=cfg.dense_layers, recurrent_units=cfg.recurrent_units,
    )


@dataclass
class FittedModels:
    gps: gps.GpsEnsemble
    deepsdrf: survival.OutcomeEnsemble
    snn: survival.OutcomeEnsemble

    def outcome(self, kind):
        return self.deepsdrf if kind == "deepsdrf" else self.snn


def fit_models(cfg: ExperimentConfig, train: dgp.PatientPanel, seed: int) -> FittedModels:
    D = train.dim_d
    over = _net_overrides(cfg)
    gcfg = gps.default_gps_config(D, cfg.num_basis_j, cfg.history_u, seed=seed, **over)
    doses = gps.gps_training_rows(train, cfg.history_u)[2]
    lo, hi = float(doses.min()), float(doses.max())
    spec = gps.BasisSpec(cfg.basis_kind, cfg.num_basis_j, lo, hi if hi > lo else lo + 1.0)
    g = gps.fit_gps(train, spec, gcfg, cfg.ensemble_m, cfg.history_u)
    h = cfg.dgp.history_h
    dcfg = survival.default_outcome_config(2, D, h, seed=seed + 500, **over)
    deep = survival.fit_outcome(train, g, dcfg, cfg.ensemble_m, "deepsdrf", h, cfg.gps_feature)
    scfg = survival.default_outcome_config(D + 1, D, h, seed=seed + 500, **over)
    snn = survival.fit_outcome(train, None, scfg, cfg.ensemble_m, "snn", h)
    return FittedModels(g, deep, snn)


def band_doses(cfg: ExperimentConfig, doses: np.ndarray) -> dict:
    return {
        "center": np.percentile(doses, np.linspace(*cfg.eval_band, cfg.n_eval_doses)),
        "low": np.percentile(doses, cfg.stress_low),
        "high": np.percentile(doses, cfg.stress_high),
    }


def evaluate_models(cfg: ExperimentConfig, models: FittedModels, test: dgp.PatientPanel,
                    oracle: dgp.TruthOracle) -> dict:
    """Metrics per model and dose band; identical test cohort and doses for both models."""
    xs = test.x_sum()
    bands = band_doses(cfg, test.treatment[:, 0])
    ev = survival.gps_evaluator_for(models.gps, test.covariates)
    out = {}
    for kind in MODELS:
        out[kind] = {}
        for band, doses in bands.items():
            smp = survival.cadr_samples(models.outcome(kind), models.gps, doses, test.covariates, ev)
            est = survival.summarize_curves(smp)
            truth = dgp.true_survival(doses[:, None], xs[None], oracle)[..., 1:]
            bias, excluded = metric_bias(est.survival_mean, truth, return_excluded=True)
            out[kind][band] = {
                "bias": bias,
                "bias_excluded": excluded,
                "coverage": metric_coverage(est.survival_mean, est.ci_lo, est.ci_hi, truth),
                "rmse": metric_rmse(est.survival_mean, truth),
                "rmse_sqrt": metric_rmse_sqrt(est.survival_mean, truth),
                "mean_half_width": float(np.mean((est.ci_hi - est.ci_lo) / 2)),
            }
        out[kind]["doses"] = {b: d.tolist() for b, d in bands.items()}
    return out


def state_summary(panel: dgp.PatientPanel, u: int) -> np.ndarray:
    """Mean z-scored covariate over the commencement history window."""
    win, mask = gps.commencement_windows(panel, u)
    flat = panel.covariates[:, 0]
    mu, sd = flat.mean(axis=0), flat.std(axis=0)
    z = (win - mu) / np.where(sd > 0, sd, 1.0)
    per_step = z.mean(axis=2)
    return (per_step * mask).sum(axis=1) / np.maximum(mask.sum(axis=1), 1.0)


def recommend_policies(cfg: ExperimentConfig, models: FittedModels, test: dgp.PatientPanel,
                       seed: int, kinds=MODELS) -> dict:
    """Recommended commencement doses for every method, with r-values and flags."""
    a_obs = test.treatment[:, 0]
    grid = recommend.ActionGrid.from_doses(a_obs, cfg.n_levels)
    summary = state_summary(test, cfg.history_u)
    edges = recommend.quantile_edges(summary, cfg.n_state_bins)
    states = recommend.state_bins(summary, edges)
    ev = survival.gps_evaluator_for(models.gps, test.covariates)
    doses = {"original": a_obs}
    r_values = {"original": np.zeros_like(a_obs)}
    patient_flags = {"original": np.zeros(a_obs.size, dtype=bool)}
    flags = {}
    for kind in kinds:
        out = models.outcome(kind)
        psi_grid = survival.psi_bar_matrix(out, models.gps, grid.levels, test.covariates, ev).T
        psi_obs = survival.psi_bar_matrix(out, models.gps, a_obs[None], test.covariates, ev)[0]
        rec, rval, floored = recommend.recommend_rs_batch(psi_grid, psi_obs, a_obs, grid, cfg.n_draws, seed)
        doses[f"{kind}_rs"], r_values[f"{kind}_rs"], patient_flags[f"{kind}_rs"] = rec, rval, floored
        rewards, rew_floored = recommend.log_ratio(psi_grid, psi_obs[:, None])
        pol = recommend.fit_rl_policy(states, rewards, cfg.n_state_bins, alpha=cfg.rl_alpha,
                                      gamma=cfg.rl_gamma, iters=cfg.rl_iters, sweeps=cfg.rl_sweeps,
                                      seed=seed, state_edges=edges)
        act = pol.act(states)
        idx = np.arange(a_obs.size)
        doses[f"{kind}_rl"] = grid.levels[act]
        r_values[f"{kind}_rl"] = rewards[idx, act]
        patient_flags[f"{kind}_rl"] = rew_floored[idx, act]
        flags[kind] = {"rs_floored": int(floored.sum()), "rl_converged": bool(pol.converged),
                       "rl_iterations": pol.n_iterations}
    return {"doses": doses, "r_values": r_values, "patient_flags": patient_flags,
            "flags": flags, "grid": grid.levels.tolist()}


def recommendation_rows(rec: dict, kind: str) -> list:
    """:class:`recommend.Recommendation` rows (methods ``rs`` and ``rl``) for one outcome model."""
    rows = []
    a_obs = rec["doses"]["original"]
    for algo in ("rs", "rl"):
        method = f"{kind}_{algo}"
        extra = "rl_unconverged" if algo == "rl" and not rec["flags"][kind]["rl_converged"] else ""
        d, r, fl = rec["doses"][method], rec["r_values"][method], rec["patient_flags"][method]
        for i in range(a_obs.size):
            f = [x for x in ("floored" if fl[i] else "", extra) if x]
            rows.append(recommend.Recommendation(i, float(a_obs[i]), float(d[i]), float(r[i]), algo, ";".join(f)))
    return rows


def policy_outcomes(doses: dict, test: dgp.PatientPanel, oracle: dgp.TruthOracle) -> dict:
    """True survival under each policy's commencement doses, held fixed over follow-up."""
    xs = test.x_sum()
    out = {}
    for name, d in doses.items():
        surv = dgp.true_survival(d, xs, oracle)  # [N, T]
        curve = surv.mean(axis=0)
        out[name] = {
            "dose_mean": float(d.mean()),
            "dose_q05": float(np.quantile(d, 0.05)),
            "dose_q95": float(np.quantile(d, 0.95)),
            "overall": float(surv[:, 1:].mean()),
            "curve": curve.tolist(),
        }
        for t in REPORT_TIMES:
            if t < surv.shape[1]:
                out[name][f"t{t}"] = float(curve[t])
    return out


def run_replication(cfg: ExperimentConfig, scenario: dgp.DgpConfig, rep: int,
                    with_recommendations: bool = True) -> dict:
    seed_r = cfg.seed + rep
    t0 = time.perf_counter()
    sub = replace(cfg, dgp=scenario)
    train = dgp.simulate_panel(scenario.with_seed(2 * seed_r))
    test = dgp.simulate_panel(scenario.with_seed(2 * seed_r + 1))
    oracle = dgp.TruthOracle(cfg.truth_mode, cfg.mc_draws, seed_r)
    models = fit_models(sub, train, 1000 * seed_r)
    res = {"replication": rep, "seed": seed_r, "metrics": evaluate_models(sub, models, test, oracle)}
    if with_recommendations:
        rec = recommend_policies(sub, models, test, seed_r)
        res["recommendation"] = {
            "policies": policy_outcomes(rec["doses"], test, oracle),
            "flags": rec["flags"],
            "grid": rec["grid"],
        }
    res["seconds"] = time.perf_counter() - t0
    return res


def _safe_replication(args):
    cfg, scenario, rep, with_rec = args
    try:
        return run_replication(cfg, scenario, rep, with_rec)
    except Exception as exc:  # recorded, the scenario decides whether to fail
        logger.error("replication %d failed: %s", rep, exc)
        return {"replication": rep, "error": f"{type(exc).__name__}: {exc}",
                "traceback": traceback.format_exc()}


def run_replications(cfg: ExperimentConfig, scenario: dgp.DgpConfig, threads: int = 1,
                     with_recommendations: bool = True) -> list:
    jobs = [(cfg, scenario, r, with_recommendations) for r in range(cfg.replications)]
    if threads <= 1:
        return [_safe_replication(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_safe_replication, jobs))


# -- aggregation ---------------------------------------------------------------


def _ci_row(values) -> dict:
    mean, lo, hi = percentile_ci(values)
    return {"mean": mean, "ci_lo": lo, "ci_hi": hi}


def aggregate_metrics(results: list) -> dict:
    ok = [r for r in results if "error" not in r]
    out = {}
    for kind in MODELS:
        out[kind] = {}
        for band in BANDS:
            out[kind][band] = {
                m: _ci_row([r["metrics"][kind][band][m] for r in ok])
                for m in ("bias", "coverage", "rmse", "rmse_sqrt", "mean_half_width")
            }
    return out


def aggregate_recommendations(results: list) -> dict:
    ok = [r for r in results if "error" not in r and "recommendation" in r]
    if not ok:
        return {}
    out = {}
    for pol in POLICIES:
        rows = [r["recommendation"]["policies"][pol] for r in ok]
        keys = [k for k in rows[0] if k != "curve"]
        out[pol] = {k: _ci_row([row[k] for row in rows]) for k in keys}
        out[pol]["curve"] = np.mean([row["curve"] for row in rows], axis=0).tolist()
    for pol in POLICIES[1:]:
        gains = [r["recommendation"]["policies"][pol]["overall"]
                 - r["recommendation"]["policies"]["original"]["overall"] for r in ok]
        out[pol]["gain_overall"] = _ci_row(gains)
        for t in REPORT_TIMES:
            key = f"t{t}"
            if key in ok[0]["recommendation"]["policies"][pol]:
                g = [r["recommendation"]["policies"][pol][key]
                     - r["recommendation"]["policies"]["original"][key] for r in ok]
                out[pol][f"gain_{key}"] = _ci_row(g)
    for kind in MODELS:
        diffs = [r["recommendation"]["policies"][f"{kind}_rs"]["dose_mean"]
                 - r["recommendation"]["policies"][f"{kind}_rl"]["dose_mean"] for r in ok]
        out[f"{kind}_rs_minus_rl_dose"] = _ci_row(diffs)
        out[f"{kind}_rl_converged"] = float(np.mean([r["recommendation"]["flags"][kind]["rl_converged"] for r in ok]))
    return out


@dataclass
class ScenarioReport:
    config_hash: str
    scenario: dict
    n_replications: int
    n_failed: int
    failed: bool
    metrics: dict
    recommendation: dict
    replications: list
    failures: list
    seconds: float = 0.0

    def to_dict(self, include_runtime: bool = False) -> dict:
        d = asdict(self)
        if not include_runtime:
            d.pop("seconds")
            for r in d["replications"]:
                r.pop("seconds", None)
        return d


def run_scenario(cfg: ExperimentConfig, scenario: dgp.DgpConfig | None = None, threads: int = 1,
                 with_recommendations: bool = True, results: list | None = None) -> ScenarioReport:
    """Replicate fits on ``scenario`` and aggregate metrics with percentile CIs.

    The scenario fails when more than ``cfg.fail_fraction`` of replications fail.
    """
    scenario = scenario or cfg.dgp
    t0 = time.perf_counter()
    if results is None:
        results = run_replications(cfg, scenario, threads, with_recommendations)
    failures = [{"replication": r["replication"], "error": r["error"]} for r in results if "error" in r]
    ok = [r for r in results if "error" not in r]
    failed = len(failures) > cfg.fail_fraction * len(results) or not ok
    return ScenarioReport(
        config_hash=config_hash(cfg, scenario),
        scenario=scenario.to_dict(),
        n_replications=len(results),
        n_failed=len(failures),
        failed=failed,
        metrics=aggregate_metrics(ok) if ok else {},
        recommendation=aggregate_recommendations(ok) if ok else {},
        replications=ok,
        failures=failures,
        seconds=time.perf_counter() - t0,
    )


def run_recommendation_eval(cfg: ExperimentConfig, scenario: dgp.DgpConfig | None = None,
                            threads: int = 1) -> ScenarioReport:
    return run_scenario(cfg, scenario, threads, with_recommendations=True)


def run_continuous_benchmark(cfg: continuous.ContinuousConfig) -> dict:
    """Bias / squared error of the three variants in both worlds with percentile CIs."""
    out = {"config": cfg.to_dict(), "worlds": {}}
    for world in continuous.WORLDS:
        reps = [continuous.run_world(world, cfg, r) for r in range(cfg.replications)]
        out["worlds"][world] = {
            v: {m: _ci_row([rep[v][m] for rep in reps]) for m in ("bias", "rmse", "rmse_sqrt")}
            for v in continuous.VARIANTS
        }
        out["worlds"][world]["replications"] = reps
    return out


# -- report files --------------------------------------------------------------


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def metrics_long_rows(report: ScenarioReport):
    for rep in report.replications:
        for kind in MODELS:
            for band in BANDS:
                for metric, value in rep["metrics"][kind][band].items():
                    yield [report.config_hash, rep["replication"], kind, band, metric, value]


def recommendation_long_rows(report: ScenarioReport):
    for rep in report.replications:
        if "recommendation" not in rep:
            continue
        for pol, row in rep["recommendation"]["policies"].items():
            for t, v in enumerate(row["curve"]):
                yield [report.config_hash, rep["replication"], pol, t, v]


def write_reports(reports: list, out_dir, cfg: ExperimentConfig) -> dict:
    """``report.json``, ``metrics_long.csv``, ``survival_curves_long.csv`` and
    ``timing.json`` (runtime kept apart so the other files are reproducible)."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "report": os.path.join(out_dir, "report.json"),
        "metrics": os.path.join(out_dir, "metrics_long.csv"),
        "curves": os.path.join(out_dir, "survival_curves_long.csv"),
        "timing": os.path.join(out_dir, "timing.json"),
    }
    write_json(paths["report"], {"config": cfg.to_dict(), "scenarios": [r.to_dict() for r in reports]})
    with open(paths["metrics"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["config_hash", "replication", "model", "band", "metric", "value"])
        for r in reports:
            w.writerows(metrics_long_rows(r))
    with open(paths["curves"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["config_hash", "replication", "policy", "t", "true_survival"])
        for r in reports:
            w.writerows(recommendation_long_rows(r))
    write_json(paths["timing"], {r.config_hash: {"seconds": r.seconds,
                                                 "replications": [x.get("seconds") for x in r.replications]}
                                 for r in reports})
    return paths
