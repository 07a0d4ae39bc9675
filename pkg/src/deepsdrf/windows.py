import numpy as np


def history_windows(seq: np.ndarray, u: int):
    """Trailing windows of length ``u`` ending at every step.

    ``seq`` is ``[N, T, F]``; returns ``(windows [N, T, u, F], mask [N, T, u])``
    where steps before ``t = 0`` are zero-filled and masked out.
    """
    seq = np.asarray(seq, dtype=np.float64)
    N, T, F = seq.shape
    padded = np.concatenate([np.zeros((N, u - 1, F)), seq], axis=1)
    idx = np.arange(T)[:, None] + np.arange(u)[None, :]
    windows = padded[:, idx]
    mask = (idx >= u - 1).astype(np.float64)
    return windows, np.broadcast_to(mask, (N, T, u)).copy()


def flatten_steps(windows: np.ndarray, mask: np.ndarray):
    """Merge patient and step axes: ``[N, T, u, F] -> [N*T, u, F]``."""
    N, T, u, F = windows.shape
    return windows.reshape(N * T, u, F), mask.reshape(N * T, u)
