"""Gated recurrent unit kernels, numba and numpy variants.

Gate layout in the stacked weights is ``[update | reset | candidate]``::

    z  = sigmoid(x W_z + h U_z + b_z)
    r  = sigmoid(x W_r + h U_r + b_r)
    n  = tanh(x W_n + (r * h) U_n + b_n)
    h' = (1 - z) * n + z * h

A masked step carries the previous state through unchanged:
``h_t = m_t * h' + (1 - m_t) * h_{t-1}``.

Both variants share signatures so tests can compare them directly; the
module-level ``gru_forward`` / ``gru_backward`` point at the active backend.
"""
import numpy as np

from ._accel import BACKEND, njit


def _sigmoid(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def gru_forward_numpy(x, mask, W, U, b):
    B, T, _ = x.shape
    R = U.shape[0]
    hs = np.zeros((B, T + 1, R))
    z = np.empty((B, T, R))
    r = np.empty((B, T, R))
    n = np.empty((B, T, R))
    for t in range(T):
        h = hs[:, t]
        ax = x[:, t] @ W + b
        ah = h @ U[:, : 2 * R]
        zt = _sigmoid(ax[:, :R] + ah[:, :R])
        rt = _sigmoid(ax[:, R : 2 * R] + ah[:, R:])
        nt = np.tanh(ax[:, 2 * R :] + (rt * h) @ U[:, 2 * R :])
        cand = (1.0 - zt) * nt + zt * h
        m = mask[:, t : t + 1]
        hs[:, t + 1] = m * cand + (1.0 - m) * h
        z[:, t], r[:, t], n[:, t] = zt, rt, nt
    return hs, z, r, n


def gru_backward_numpy(x, mask, W, U, hs, z, r, n, dh_last):
    B, T, _ = x.shape
    R = U.shape[0]
    dW = np.zeros_like(W)
    dU = np.zeros_like(U)
    db = np.zeros(3 * R)
    dh = dh_last.copy()
    for t in range(T - 1, -1, -1):
        h = hs[:, t]
        m = mask[:, t : t + 1]
        zt, rt, nt = z[:, t], r[:, t], n[:, t]
        dc = m * dh
        dprev = (1.0 - m) * dh + dc * zt
        dan = dc * (1.0 - zt) * (1.0 - nt * nt)
        daz = dc * (h - nt) * zt * (1.0 - zt)
        rh = rt * h
        drh = dan @ U[:, 2 * R :].T
        dar = drh * h * rt * (1.0 - rt)
        dprev += drh * rt
        da = np.concatenate((daz, dar, dan), axis=1)
        dW += x[:, t].T @ da
        db += da.sum(axis=0)
        dU[:, : 2 * R] += h.T @ da[:, : 2 * R]
        dU[:, 2 * R :] += rh.T @ dan
        dprev += da[:, : 2 * R] @ U[:, : 2 * R].T
        dh = dprev
    return dW, dU, db


@njit
def _sig(v):
    if v >= 0.0:
        return 1.0 / (1.0 + np.exp(-v))
    e = np.exp(v)
    return e / (1.0 + e)


@njit
def gru_forward_numba(x, mask, W, U, b):
    B, T, F = x.shape
    R = U.shape[0]
    hs = np.zeros((B, T + 1, R))
    z = np.empty((B, T, R))
    r = np.empty((B, T, R))
    n = np.empty((B, T, R))
    rh = np.empty(R)
    for i in range(B):
        for t in range(T):
            m = mask[i, t]
            for k in range(R):
                az = b[k]
                ar = b[R + k]
                for f in range(F):
                    xv = x[i, t, f]
                    az += xv * W[f, k]
                    ar += xv * W[f, R + k]
                for j in range(R):
                    hv = hs[i, t, j]
                    az += hv * U[j, k]
                    ar += hv * U[j, R + k]
                z[i, t, k] = _sig(az)
                r[i, t, k] = _sig(ar)
            for j in range(R):
                rh[j] = r[i, t, j] * hs[i, t, j]
            for k in range(R):
                an = b[2 * R + k]
                for f in range(F):
                    an += x[i, t, f] * W[f, 2 * R + k]
                for j in range(R):
                    an += rh[j] * U[j, 2 * R + k]
                nv = np.tanh(an)
                n[i, t, k] = nv
                h = hs[i, t, k]
                cand = (1.0 - z[i, t, k]) * nv + z[i, t, k] * h
                hs[i, t + 1, k] = m * cand + (1.0 - m) * h
    return hs, z, r, n


@njit
def gru_backward_numba(x, mask, W, U, hs, z, r, n, dh_last):
    B, T, F = x.shape
    R = U.shape[0]
    dW = np.zeros_like(W)
    dU = np.zeros_like(U)
    db = np.zeros(3 * R)
    dh = np.empty(R)
    dprev = np.empty(R)
    da = np.empty(3 * R)
    drh = np.empty(R)
    for i in range(B):
        for k in range(R):
            dh[k] = dh_last[i, k]
        for t in range(T - 1, -1, -1):
            m = mask[i, t]
            for k in range(R):
                h = hs[i, t, k]
                zt = z[i, t, k]
                nt = n[i, t, k]
                dc = m * dh[k]
                dprev[k] = (1.0 - m) * dh[k] + dc * zt
                da[2 * R + k] = dc * (1.0 - zt) * (1.0 - nt * nt)
                da[k] = dc * (h - nt) * zt * (1.0 - zt)
            for j in range(R):
                acc = 0.0
                for k in range(R):
                    acc += da[2 * R + k] * U[j, 2 * R + k]
                drh[j] = acc
            for j in range(R):
                rt = r[i, t, j]
                h = hs[i, t, j]
                da[R + j] = drh[j] * h * rt * (1.0 - rt)
                dprev[j] += drh[j] * rt
            for c in range(3 * R):
                g = da[c]
                if g == 0.0:
                    continue
                db[c] += g
                for f in range(F):
                    dW[f, c] += x[i, t, f] * g
            for j in range(R):
                h = hs[i, t, j]
                rhj = r[i, t, j] * h
                acc = 0.0
                for c in range(2 * R):
                    dU[j, c] += h * da[c]
                    acc += da[c] * U[j, c]
                for k in range(R):
                    dU[j, 2 * R + k] += rhj * da[2 * R + k]
                dprev[j] += acc
            for k in range(R):
                dh[k] = dprev[k]
    return dW, dU, db


def td_sweep_numpy(q, states, next_states, policy, rewards, order, alpha, gamma):
    """One pass of TD(0) updates over episodes in ``order``, every action per episode.

    The bootstrap value ``Q(s', policy[s'])`` is read once per episode before
    that episode's action updates; ``next_states < 0`` marks terminal steps.
    """
    for i in order:
        s = states[i]
        sn = next_states[i]
        boot = 0.0 if sn < 0 else q[sn, policy[sn]]
        q[s] += alpha * (rewards[i] + gamma * boot - q[s])
    return q


@njit
def td_sweep_numba(q, states, next_states, policy, rewards, order, alpha, gamma):
    L = q.shape[1]
    for k in range(order.shape[0]):
        i = order[k]
        s = states[i]
        sn = next_states[i]
        boot = 0.0 if sn < 0 else q[sn, policy[sn]]
        for a in range(L):
            q[s, a] += alpha * (rewards[i, a] + gamma * boot - q[s, a])
    return q


if BACKEND == "numba":
    gru_forward = gru_forward_numba
    gru_backward = gru_backward_numba
    td_sweep = td_sweep_numba
else:
    gru_forward = gru_forward_numpy
    gru_backward = gru_backward_numpy
    td_sweep = td_sweep_numpy
