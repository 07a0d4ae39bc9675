"""Dose recommendation from estimated survival dose-response curves.

The score of switching a patient from dose ``a`` to ``a'`` is the log ratio of
time-averaged survival, ``log psi_bar(a', x) - log psi_bar(a, x)``. Random
search scores sampled grid doses per patient; the RL route learns a tabular
Q-function over covariate-state bins with TD updates inside policy iteration.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels

logger = logging.getLogger(__name__)

PSI_FLOOR = 1e-9


@dataclass(frozen=True)
class ActionGrid:
    levels: np.ndarray
    lo_percentile: float = 10.0
    hi_percentile: float = 90.0

    def __post_init__(self):
        lv = np.asarray(self.levels, dtype=float)
        if lv.size == 0:
            raise ValueError("action grid is empty")
        if lv.size > 1 and np.any(np.diff(lv) <= 0):
            raise ValueError("action levels must be strictly increasing")
        object.__setattr__(self, "levels", lv)

    @classmethod
    def from_doses(cls, doses, n_levels: int = 20, lo_percentile: float = 10.0,
                   hi_percentile: float = 90.0) -> "ActionGrid":
        lo, hi = np.percentile(np.asarray(doses, dtype=float), [lo_percentile, hi_percentile])
        levels = np.array([lo]) if hi <= lo else np.linspace(lo, hi, n_levels)
        return cls(levels, lo_percentile, hi_percentile)

    @property
    def lo(self) -> float:
        return float(self.levels[0])

    @property
    def hi(self) -> float:
        return float(self.levels[-1])

    def __len__(self):
        return self.levels.size


@dataclass
class Recommendation:
    patient_id: int
    original_dose: float
    recommended_dose: float
    r_value: float
    method: str
    flags: str = ""


def log_ratio(psi_new, psi_old):
    """``log psi_new - log psi_old`` with both floored at 1e-9; returns ``(r, floored)``."""
    psi_new = np.asarray(psi_new, dtype=float)
    psi_old = np.asarray(psi_old, dtype=float)
    floored = (psi_new < PSI_FLOOR) | (psi_old < PSI_FLOOR)
    r = np.log(np.maximum(psi_new, PSI_FLOOR)) - np.log(np.maximum(psi_old, PSI_FLOOR))
    return r, floored


def recommender_value(cadr_fn, x, a, a_prime) -> float:
    """``r(x, a, a')``; positive means ``a'`` gives higher mean survival.

    ``cadr_fn(a, x)`` returns the time-averaged survival ``psi_bar``.
    """
    if a_prime == a:
        return 0.0
    r, floored = log_ratio(cadr_fn(a_prime, x), cadr_fn(a, x))
    if np.any(floored):
        logger.warning("psi_bar below %.0e floored before log", PSI_FLOOR)
    return float(r)


def _pick(candidates, scores, a_obs):
    # highest score, then closest to the original dose, then the smaller dose
    order = np.lexsort((candidates, np.abs(candidates - a_obs), -scores))
    return order[0]


def recommend_rs(cadr_fn, x, a_obs: float, grid: ActionGrid, n_draws: int = 50,
                 seed: int = 0, patient_id: int = 0) -> Recommendation:
    """Random search over grid doses for one patient.

    The original dose, clipped into the grid range, is always a candidate, so
    with a flat response the patient keeps their dose.
    """
    rng = np.random.default_rng(seed)
    draws = np.unique(rng.choice(grid.levels, size=n_draws, replace=True))
    stay = float(np.clip(a_obs, grid.lo, grid.hi))
    candidates = np.append(draws, stay)
    psi_obs = cadr_fn(a_obs, x)
    psi = np.array([cadr_fn(c, x) for c in candidates])
    r, floored = log_ratio(psi, psi_obs)
    k = _pick(candidates, r, a_obs)
    return Recommendation(patient_id, float(a_obs), float(candidates[k]), float(r[k]), "rs",
                          "floored" if floored.any() else "")


def recommend_rs_batch(psi_grid: np.ndarray, psi_obs: np.ndarray, a_obs: np.ndarray,
                       grid: ActionGrid, n_draws: int = 50, seed: int = 0):
    """Vectorized random search given precomputed ``psi_bar``.

    ``psi_grid`` is ``[N, L]`` over grid levels, ``psi_obs`` ``[N]`` at the
    observed doses. Returns ``(recommended [N], r [N], floored [N])``.
    """
    N, L = psi_grid.shape
    rng = np.random.default_rng(seed)
    a_obs = np.asarray(a_obs, dtype=float)
    rec = np.empty(N)
    rval = np.empty(N)
    flag = np.zeros(N, dtype=bool)
    # psi at the clipped original dose: either psi_obs or an end level
    stay = np.clip(a_obs, grid.lo, grid.hi)
    psi_stay = np.where(a_obs < grid.lo, psi_grid[:, 0],
                        np.where(a_obs > grid.hi, psi_grid[:, -1], psi_obs))
    for i in range(N):
        idx = np.unique(rng.integers(0, L, size=n_draws))
        cand = np.append(grid.levels[idx], stay[i])
        psi = np.append(psi_grid[i, idx], psi_stay[i])
        r, floored = log_ratio(psi, psi_obs[i])
        k = _pick(cand, r, a_obs[i])
        rec[i], rval[i], flag[i] = cand[k], r[k], floored.any()
    return rec, rval, flag


@dataclass
class QTable:
    q: np.ndarray  # [n_states, n_actions]
    state_edges: np.ndarray
    alpha: float = 0.05
    gamma: float = 0.99

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not np.all(np.isfinite(self.q)):
            raise ValueError("Q entries must be finite")

    @classmethod
    def zeros(cls, n_states: int, n_actions: int, state_edges=None, alpha=0.05, gamma=0.99):
        edges = np.array([]) if state_edges is None else np.asarray(state_edges, dtype=float)
        return cls(np.zeros((n_states, n_actions)), edges, alpha, gamma)

    def state_of(self, summary) -> np.ndarray:
        return state_bins(summary, self.state_edges)


def quantile_edges(summary, n_bins: int = 10) -> np.ndarray:
    """Interior quantile edges (``n_bins - 1`` of them)."""
    return np.quantile(np.asarray(summary, dtype=float), np.linspace(0, 1, n_bins + 1)[1:-1])


def state_bins(summary, edges) -> np.ndarray:
    return np.searchsorted(np.asarray(edges, dtype=float), np.asarray(summary, dtype=float), side="right")


def td_update(qtable: QTable, s: int, a: int, r: float, s_next: int | None, a_next: int | None) -> QTable:
    """One TD step ``Q(s,a) += alpha * (r + gamma * Q(s',a') - Q(s,a))`` in place.

    ``s_next=None`` marks a terminal transition (bootstrap value 0).
    """
    nxt = 0.0 if s_next is None else qtable.q[s_next, a_next]
    qtable.q[s, a] += qtable.alpha * (r + qtable.gamma * nxt - qtable.q[s, a])
    return qtable


@dataclass
class RLPolicy:
    actions: np.ndarray  # greedy action index per state
    qtable: QTable
    converged: bool
    n_iterations: int
    history: list = field(default_factory=list)

    def act(self, states) -> np.ndarray:
        return self.actions[np.asarray(states)]


def greedy(q: np.ndarray) -> np.ndarray:
    # argmax returns the first maximum, i.e. the smaller dose on ties
    return np.argmax(q, axis=1)


def fit_rl_policy(states, rewards, n_states: int, next_states=None, alpha: float = 0.05,
                  gamma: float = 0.99, iters: int = 50, sweeps: int = 5, seed: int = 0,
                  state_edges=None) -> RLPolicy:
    """Policy iteration with TD(0) evaluation over offline episodes.

    Each evaluation phase runs ``sweeps`` passes of :func:`td_update` over all
    episodes and every action. The episode order is drawn once from ``seed``;
    reshuffling every pass would keep near-tied Q entries jittering under a
    constant step size, so the greedy policy would never settle.

    ``states[i]`` is the start state of episode ``i`` and ``rewards[i, a]`` the
    pseudo-environment reward for action ``a`` there. ``next_states[i]`` is
    the following state, or ``-1`` (default) for a terminal step; the
    bootstrap action at the next state follows the current policy.
    """
    states = np.asarray(states, dtype=np.int64)
    rewards = np.asarray(rewards, dtype=float)
    n_ep, n_actions = rewards.shape
    nxt = np.full(n_ep, -1) if next_states is None else np.asarray(next_states, dtype=np.int64)
    rng = np.random.default_rng(seed)
    qt = QTable.zeros(n_states, n_actions, state_edges, alpha, gamma)
    policy = rng.integers(0, n_actions, size=n_states)
    order = rng.permutation(n_ep)
    history = []
    converged = False
    it = 0
    for it in range(1, iters + 1):
        for _ in range(sweeps):
            kernels.td_sweep(qt.q, states, nxt, policy, rewards, order, alpha, gamma)
        new_policy = greedy(qt.q)
        changed = int(np.sum(new_policy != policy))
        history.append(changed)
        policy = new_policy
        if changed == 0:
            converged = True
            break
    if not converged:
        logger.warning("policy iteration did not converge in %d iterations", iters)
    return RLPolicy(policy, qt, converged, it, history)


def policy_value(q_values, density) -> float:
    """``V(x) = sum_a' w(a') Q(a', x)`` with the GPS renormalized over the grid."""
    q_values = np.asarray(q_values, dtype=float)
    w = np.asarray(density, dtype=float)
    total = w.sum()
    w = np.full(w.shape, 1.0 / w.size) if total <= 0 else w / total
    return float(np.dot(w, q_values))


def bellman_q(psi_bar_obs: float, r_values) -> np.ndarray:
    """``Q(a', x) = psi_bar(a_obs, x) + r(x, a_obs, a')``."""
    return psi_bar_obs + np.asarray(r_values, dtype=float)


def write_recommendations(path, recs) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "method", "original_dose", "recommended_dose", "r_value", "flags"])
        for rec in recs:
            w.writerow([rec.patient_id, rec.method, repr(rec.original_dose),
                        repr(rec.recommended_dose), repr(rec.r_value), rec.flags])


def read_recommendations(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            Recommendation(int(row["patient_id"]), float(row["original_dose"]),
                           float(row["recommended_dose"]), float(row["r_value"]),
                           row["method"], row["flags"])
            for row in csv.DictReader(fh)
        ]
