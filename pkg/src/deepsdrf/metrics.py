"""Bias, coverage and squared-error metrics for dose-response estimates."""
from __future__ import annotations

import logging

import numpy as np

logger = logging.getLogger(__name__)

TRUTH_FLOOR = 1e-9


def metric_bias(psi_hat, psi_true, return_excluded: bool = False):
    """Mean absolute relative error ``mean |(psi_hat - psi) / psi|``.

    Entries with ``|psi| < 1e-9`` are excluded and counted.
    """
    psi_hat = np.asarray(psi_hat, dtype=float).ravel()
    psi_true = np.asarray(psi_true, dtype=float).ravel()
    if psi_hat.shape != psi_true.shape:
        raise ValueError("psi_hat and psi_true must be aligned")
    keep = np.abs(psi_true) >= TRUTH_FLOOR
    excluded = int(psi_true.size - keep.sum())
    if not keep.any():
        raise ValueError("every true value is below the exclusion floor")
    if excluded:
        logger.info("metric_bias excluded %d near-zero truths", excluded)
    out = float(np.mean(np.abs((psi_hat[keep] - psi_true[keep]) / psi_true[keep])))
    return (out, excluded) if return_excluded else out


def metric_coverage(psi_hat, ci_lo, ci_hi, psi_true) -> float:
    """Share of units whose error ``|psi_hat - psi|`` is within the band half-width.

    The boundary counts as covered, so an exact estimate with a zero-width
    band is covered.
    """
    psi_hat = np.asarray(psi_hat, dtype=float)
    half = (np.asarray(ci_hi, dtype=float) - np.asarray(ci_lo, dtype=float)) / 2.0
    err = np.abs(psi_hat - np.asarray(psi_true, dtype=float))
    return float(np.mean(err <= half))


def metric_rmse(psi_hat, psi_true) -> float:
    """Mean squared error, without a square root (see :func:`metric_rmse_sqrt`)."""
    psi_hat = np.asarray(psi_hat, dtype=float)
    psi_true = np.asarray(psi_true, dtype=float)
    if psi_hat.shape != psi_true.shape:
        raise ValueError("psi_hat and psi_true must be aligned")
    return float(np.mean((psi_hat - psi_true) ** 2))


def metric_rmse_sqrt(psi_hat, psi_true) -> float:
    return float(np.sqrt(metric_rmse(psi_hat, psi_true)))


def percentile_ci(values, lo: float = 2.5, hi: float = 97.5):
    """``(mean, lo, hi)`` with empirical percentiles across replications."""
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return float("nan"), float("nan"), float("nan")
    a, b = np.percentile(v, [lo, hi])
    return float(v.mean()), float(a), float(b)
