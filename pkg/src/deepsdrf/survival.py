"""Discrete-time hazard ensembles and survival dose-response curves.

Two outcome models share one network family:

* ``deepsdrf`` reads, per step, the dose and the GPS evaluated at that dose;
* ``snn`` reads the z-scored covariates and dose.

Each member maps a window of the last ``history_h`` step features to the
hazard at the window's final step and is trained with masked binary
cross-entropy against the longitudinal labels.
"""
from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .dgp import PatientPanel, survival_from_hazards
from .gps import GpsEnsemble, GpsEvaluator
from .windows import flatten_steps, history_windows

BUNDLE_VERSION = 1
KINDS = ("deepsdrf", "snn")


def build_labels(event_time, censor_time, event_flag, q: int):
    """Loss mask ``theta`` and event indicators ``gamma``, each ``[..., q+1]``.

    Event patients are unmasked through their event step; censored patients
    through the step before censoring.
    """
    T = np.asarray(event_time, dtype=np.int64)
    C = np.asarray(censor_time, dtype=np.int64)
    Y = np.asarray(event_flag, dtype=np.int64)
    if np.any((Y == 1) & (T > C)) or np.any((Y == 0) & (T <= C)):
        raise ValueError("event_flag must equal I(event_time <= censor_time)")
    tau = np.where(Y == 1, T, C)
    if np.any(tau > q):
        raise ValueError(f"q={q} is smaller than an observed time ({int(tau.max())})")
    steps = np.arange(q + 1)
    tau_ = tau[..., None]
    gamma = ((steps == tau_) & (Y[..., None] == 1)).astype(np.int64)
    theta = ((steps < tau_) | (gamma == 1)).astype(np.int64)
    return theta, gamma


def survival_from_hazard(hazards) -> np.ndarray:
    return survival_from_hazards(hazards)


@dataclass
class Standardizer:
    mean: np.ndarray
    sd: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray) -> "Standardizer":
        flat = np.asarray(features, dtype=float).reshape(-1, features.shape[-1])
        sd = flat.std(axis=0)
        return cls(flat.mean(axis=0), np.where(sd > 0, sd, 1.0))

    def transform(self, features):
        return (np.asarray(features, dtype=float) - self.mean) / self.sd

    def to_dict(self):
        return {"mean": self.mean.tolist(), "sd": self.sd.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["sd"], dtype=float))


def snn_raw_features(covariates: np.ndarray, doses: np.ndarray) -> np.ndarray:
    return np.concatenate([covariates, np.asarray(doses, dtype=float)[..., None]], axis=-1)


def standardize(panel: PatientPanel, stats: Standardizer | None = None):
    """Z-scored covariates and dose, ``[N, T, D+1]``, plus the statistics used.

    Statistics come from observed steps of ``panel`` unless ``stats`` is given
    (pass training statistics when transforming a test cohort).
    """
    raw = snn_raw_features(panel.covariates, panel.treatment)
    if stats is None:
        observed = np.arange(panel.n_steps)[None, :] <= panel.observed_time[:, None]
        stats = Standardizer.fit(raw[observed])
    return stats.transform(raw), stats


@dataclass
class CadrEstimate:
    """Survival curve summaries over ``t = 1..max_followup`` (last axis)."""

    survival_mean: np.ndarray
    survival_sd: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    psi_bar: np.ndarray

    def to_record(self, a: float) -> dict:
        t = np.arange(1, self.survival_mean.shape[-1] + 1)
        return {
            "a": float(a),
            "t": t.tolist(),
            "mean": np.asarray(self.survival_mean).tolist(),
            "sd": np.asarray(self.survival_sd).tolist(),
            "ci_lo": np.asarray(self.ci_lo).tolist(),
            "ci_hi": np.asarray(self.ci_hi).tolist(),
            "psi_bar": np.asarray(self.psi_bar).tolist(),
        }


def summarize_curves(samples: np.ndarray) -> CadrEstimate:
    """Summaries over the leading (ensemble) axis of survival curves ``[S, ..., T+1]``.

    Step 0 is dropped. The band is the 2.5/97.5 percentile of the samples,
    widened if needed so it always contains the mean.
    """
    s = samples[..., 1:]
    # shifted by the first sample so identical members reproduce it exactly
    shifted = s - s[0]
    mean = s[0] + shifted.mean(axis=0)
    lo, hi = np.quantile(s, [0.025, 0.975], axis=0)
    return CadrEstimate(
        survival_mean=mean,
        survival_sd=shifted.std(axis=0),
        ci_lo=np.minimum(lo, mean),
        ci_hi=np.maximum(hi, mean),
        psi_bar=mean.mean(axis=-1),
    )


@dataclass
class OutcomeEnsemble:
    members: list
    kind: str
    history_h: int
    scaler: Standardizer
    max_followup: int
    meta: dict = field(default_factory=dict)
    gps_feature: str = "log"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown outcome kind {self.kind!r}")
        if not self.members:
            raise ValueError("ensemble needs at least one member")

    @property
    def ensemble_m(self) -> int:
        return len(self.members)

    def member_hazards(self, raw_features: np.ndarray) -> np.ndarray:
        """Hazards ``[m, N, T]`` from unscaled step features ``[N, T, F]``."""
        feats = self.scaler.transform(raw_features)
        N, T, _ = feats.shape
        w, mk = flatten_steps(*history_windows(feats, self.history_h))
        return np.stack([net.predict(w, mk).reshape(N, T) for net in self.members])

    def save(self, path):
        manifest = {
            "version": BUNDLE_VERSION,
            "kind": "outcome",
            "model": self.kind,
            "history_h": self.history_h,
            "max_followup": self.max_followup,
            "scaler": self.scaler.to_dict(),
            "gps_feature": self.gps_feature,
            "members": [f"member_{k:03d}.json" for k in range(self.ensemble_m)],
            "meta": self.meta,
        }
        with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
            zf.writestr("manifest.json", json.dumps(manifest, indent=2))
            for name, net in zip(manifest["members"], self.members):
                zf.writestr(name, json.dumps(net.to_dict()))

    @classmethod
    def load(cls, path) -> "OutcomeEnsemble":
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            if manifest.get("version") != BUNDLE_VERSION or manifest.get("kind") != "outcome":
                raise ValueError(f"{path} is not an outcome bundle of version {BUNDLE_VERSION}")
            members = [nn.Network.from_dict(json.loads(zf.read(n))) for n in manifest["members"]]
        return cls(
            members,
            manifest["model"],
            manifest["history_h"],
            Standardizer.from_dict(manifest["scaler"]),
            manifest["max_followup"],
            manifest.get("meta", {}),
            manifest.get("gps_feature", "log"),
        )


GPS_FLOOR = 1e-3


def deepsdrf_raw_features(doses, gps_values, gps_feature: str = "log") -> np.ndarray:
    """Per-step ``(dose, GPS)`` features; ``gps_feature="log"`` uses ``log(GPS + 1e-3)``."""
    g = np.asarray(gps_values, dtype=float)
    if gps_feature == "log":
        g = np.log(g + GPS_FLOOR)
    elif gps_feature != "raw":
        raise ValueError(f"unknown gps_feature {gps_feature!r}")
    return np.stack([np.asarray(doses, dtype=float), g], axis=-1)


def gps_evaluator_for(gps: GpsEnsemble, covariates: np.ndarray) -> GpsEvaluator:
    """Evaluator over every patient-step covariate window, flattened ``N*T``."""
    w, mk = flatten_steps(*history_windows(covariates, gps.history_u))
    return gps.evaluator(w, mk)


def observed_gps(gps: GpsEnsemble, panel: PatientPanel) -> np.ndarray:
    """Ensemble GPS at the observed dose of each patient-step, ``[N, T]``."""
    ev = gps_evaluator_for(gps, panel.covariates)
    return ev.density(panel.treatment.ravel()).reshape(panel.treatment.shape)


def default_outcome_config(n_features: int, dim_d: int, history_h: int = 1, **overrides) -> nn.NetConfig:
    base = dict(
        n_features=n_features,
        n_outputs=1,
        history_u=history_h,
        dense_layers=2,
        dense_units=max(4, dim_d),
        recurrent_units=8,
        output_head="sigmoid",
    )
    base.update(overrides)
    return nn.NetConfig(**base)


def fit_outcome(
    panel: PatientPanel,
    gps: GpsEnsemble | None,
    net_cfg: nn.NetConfig | None = None,
    m: int = 25,
    kind: str = "deepsdrf",
    history_h: int = 1,
    gps_feature: str = "log",
) -> OutcomeEnsemble:
    if kind not in KINDS:
        raise ValueError(f"unknown outcome kind {kind!r}")
    q = panel.n_steps - 1
    theta, gamma = build_labels(panel.event_time, panel.censor_time, panel.event_flag, q)
    if kind == "deepsdrf":
        if gps is None:
            raise ValueError("deepsdrf outcome model needs a fitted GPS ensemble")
        raw = deepsdrf_raw_features(panel.treatment, observed_gps(gps, panel), gps_feature)
    else:
        raw = snn_raw_features(panel.covariates, panel.treatment)
    scaler = Standardizer.fit(raw[theta == 1] if theta.any() else raw.reshape(-1, raw.shape[-1]))
    feats = scaler.transform(raw)
    w, mk = flatten_steps(*history_windows(feats, history_h))
    keep = theta.ravel() == 1
    if not keep.any():
        raise ValueError("no labelled steps to train on")
    x, mk, y = w[keep], mk[keep], gamma.ravel()[keep].astype(float)
    if net_cfg is None:
        net_cfg = default_outcome_config(raw.shape[-1], panel.dim_d, history_h)
    if net_cfg.n_features != raw.shape[-1] or net_cfg.history_u != history_h:
        raise ValueError("net_cfg does not match the outcome features / history window")
    members = []
    for k in range(m):
        net = nn.Network(net_cfg.replace(seed=net_cfg.seed + k))
        nn.train(net, x, y, loss_kind="bce")
        members.append(net)
    return OutcomeEnsemble(members, kind, history_h, scaler, panel.max_followup,
                           {"n_rows": int(keep.sum())}, gps_feature)


def cadr_samples(out: OutcomeEnsemble, gps: GpsEnsemble | None, doses, covariates,
                 gps_eval: GpsEvaluator | None = None) -> np.ndarray:
    """Survival curves with the dose held fixed, ``[S, n_doses, N, T]``.

    ``doses`` is ``[n_doses]`` (shared by all patients) or ``[n_doses, N]``
    (one dose per patient). ``S = m_out * m_gps`` for deepsdrf (every
    outcome/GPS member pair) and ``m_out`` for snn. ``covariates`` is
    ``[N, T, D]``.
    """
    covariates = np.asarray(covariates, dtype=float)
    N, T, _ = covariates.shape
    doses = np.asarray(doses, dtype=float)
    if doses.ndim == 0:
        doses = doses[None]
    if doses.ndim == 2 and doses.shape[1] != N:
        raise ValueError("per-patient doses must be [n_doses, N]")
    curves = []
    if out.kind == "snn":
        for a in doses:
            full = np.broadcast_to(np.reshape(a, (-1, 1)), (N, T))
            raw = snn_raw_features(covariates, full)
            curves.append(survival_from_hazards(out.member_hazards(raw)))
        return np.stack(curves, axis=1)
    if gps is None and gps_eval is None:
        raise ValueError("deepsdrf estimates need the GPS ensemble")
    ev = gps_eval if gps_eval is not None else gps_evaluator_for(gps, covariates)
    for a in doses:
        full = np.broadcast_to(np.reshape(a, (-1, 1)), (N, T))
        g = ev.member_density(a if np.ndim(a) == 0 else full.ravel()).reshape(-1, N, T)
        per_gps = []
        for gq in g:  # [N, T] per GPS member
            raw = deepsdrf_raw_features(full, gq, out.gps_feature)
            per_gps.append(survival_from_hazards(out.member_hazards(raw)))
        # [m_out, m_gps, N, T] -> pairs
        curves.append(np.stack(per_gps, axis=1).reshape(-1, N, T))
    return np.stack(curves, axis=1)


def psi_bar_matrix(out: OutcomeEnsemble, gps: GpsEnsemble | None, doses, covariates,
                   gps_eval: GpsEvaluator | None = None, chunk: int = 4) -> np.ndarray:
    """Ensemble-mean ``psi_bar`` for every dose and patient, ``[n_doses, N]``.

    Doses are processed in chunks to bound memory.
    """
    doses = np.asarray(doses, dtype=float)
    if out.kind == "deepsdrf" and gps_eval is None:
        gps_eval = gps_evaluator_for(gps, covariates)
    rows = []
    for i in range(0, len(doses), chunk):
        smp = cadr_samples(out, gps, doses[i : i + chunk], covariates, gps_eval)
        rows.append(smp[..., 1:].mean(axis=0).mean(axis=-1))
    return np.concatenate(rows, axis=0)


def estimate_cadr(out: OutcomeEnsemble, gps: GpsEnsemble | None, a, x) -> CadrEstimate:
    """CADR at dose ``a`` for covariate history ``x`` (``[T, D]`` or ``[N, T, D]``)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 2
    samples = cadr_samples(out, gps, [a], x[None] if single else x)[:, 0]
    est = summarize_curves(samples)
    if single:
        est = CadrEstimate(*(np.asarray(v)[0] for v in _fields(est)))
    return est


def _fields(est: CadrEstimate):
    return (est.survival_mean, est.survival_sd, est.ci_lo, est.ci_hi, est.psi_bar)
