"""CSV and JSON formats for cohorts and CADR estimates."""
from __future__ import annotations

import csv
import json

import numpy as np

from .dgp import PatientPanel


def panel_header(dim_d: int) -> list:
    return ["patient_id", "t"] + [f"x_{d + 1}" for d in range(dim_d)] + [
        "a", "event_time", "censor_time", "event_flag"]


def write_panel_csv(path, panel: PatientPanel) -> None:
    """One row per patient and step, ordered by patient then ``t``."""
    N, T, D = panel.covariates.shape
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(panel_header(D))
        for i in range(N):
            tail = [int(panel.event_time[i]), int(panel.censor_time[i]), int(panel.event_flag[i])]
            for t in range(T):
                w.writerow([i, t] + [repr(float(v)) for v in panel.covariates[i, t]]
                           + [repr(float(panel.treatment[i, t]))] + tail)


def read_panel_csv(path, max_followup: int | None = None) -> PatientPanel:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader if r]
    xcols = [k for k, name in enumerate(header) if name.startswith("x_")]
    if header != panel_header(len(xcols)):
        raise ValueError(f"unexpected panel header {header}")
    data = np.array(rows, dtype=float)
    ids = data[:, 0].astype(np.int64)
    steps = data[:, 1].astype(np.int64)
    patients = np.unique(ids)
    T = int(steps.max()) + 1
    N, D = patients.size, len(xcols)
    if data.shape[0] != N * T:
        raise ValueError("panel must have the same number of steps for every patient")
    order = np.lexsort((steps, ids))
    data = data[order]
    if not np.array_equal(data[:, 1].reshape(N, T), np.broadcast_to(np.arange(T), (N, T))):
        raise ValueError("panel steps must run 0..T-1 for every patient")
    cov = data[:, 2 : 2 + D].reshape(N, T, D)
    treat = data[:, 2 + D].reshape(N, T)
    per = data[::T]
    event_time = per[:, 3 + D].astype(np.int64)
    censor_time = per[:, 4 + D].astype(np.int64)
    event_flag = per[:, 5 + D].astype(np.int64)
    return PatientPanel(cov, treat, event_time, censor_time, event_flag,
                        T - 1 if max_followup is None else max_followup)


def write_cadr_json(path, records: list) -> None:
    """``records`` are dicts from :meth:`CadrEstimate.to_record`."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(records, fh, indent=2)
        fh.write("\n")


def read_cadr_json(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def write_cadr_long_csv(path, records: list, patient_ids=None) -> None:
    """Long format: one row per (dose, patient, t)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["a", "patient_id", "t", "mean", "sd", "ci_lo", "ci_hi"])
        for rec in records:
            mean = np.atleast_2d(rec["mean"])
            cols = [np.atleast_2d(rec[k]) for k in ("sd", "ci_lo", "ci_hi")]
            ids = range(mean.shape[0]) if patient_ids is None else patient_ids
            for row, pid in enumerate(ids):
                for j, t in enumerate(rec["t"]):
                    w.writerow([rec["a"], pid, t, mean[row, j]] + [c[row, j] for c in cols])
