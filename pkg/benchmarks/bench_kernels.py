"""Compare the numba and numpy backends.

Kernel timings call both variants directly in one process. The end-to-end
timing trains a GRU outcome network in a subprocess per backend, selected
through ``DEEPSDRF_BACKEND``.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from deepsdrf import kernels

TRAIN_SNIPPET = """
import time, numpy as np
from deepsdrf import nn
rng = np.random.default_rng(0)
x = rng.normal(size=(4000, 3, 9))
y = (rng.uniform(size=(4000, 1)) < 0.2).astype(float)
cfg = nn.NetConfig(n_features=9, history_u=3, epochs=3, optimizer="adam")
nn.train(nn.init(cfg), x, y, loss_kind="bce")  # warm-up (numba compilation)
t = time.perf_counter()
nn.train(nn.init(cfg), x, y, loss_kind="bce")
print(time.perf_counter() - t)
"""


def _best(fn, repeat):
    fn()  # warm-up / compile
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def kernel_timings(repeat: int) -> dict:
    rng = np.random.default_rng(0)
    B, T, F, R = 4096, 6, 9, 8
    x = rng.normal(size=(B, T, F))
    mask = (rng.uniform(size=(B, T)) > 0.2).astype(float)
    W, U, b = rng.normal(size=(F, 3 * R)) * 0.3, rng.normal(size=(R, 3 * R)) * 0.3, np.zeros(3 * R)
    dh = rng.normal(size=(B, R))
    fwd = kernels.gru_forward_numpy(x, mask, W, U, b)

    n_ep, S, L = 20_000, 10, 20
    states = rng.integers(0, S, n_ep)
    nxt = np.full(n_ep, -1)
    policy = np.zeros(S, dtype=np.int64)
    rewards = rng.normal(size=(n_ep, L))
    order = rng.permutation(n_ep)

    out = {}
    for name in ("numpy", "numba"):
        f = getattr(kernels, f"gru_forward_{name}")
        g = getattr(kernels, f"gru_backward_{name}")
        s = getattr(kernels, f"td_sweep_{name}")
        out[name] = {
            "gru_forward": _best(lambda: f(x, mask, W, U, b), repeat),
            "gru_backward": _best(lambda: g(x, mask, W, U, *fwd, dh), repeat),
            "td_sweep": _best(lambda: s(np.zeros((S, L)), states, nxt, policy, rewards, order, 0.05, 0.99),
                              repeat),
        }
    return out


def training_timings() -> dict:
    out = {}
    for name in ("numpy", "numba"):
        env = dict(os.environ, DEEPSDRF_BACKEND=name)
        res = subprocess.run([sys.executable, "-c", TRAIN_SNIPPET], env=env, capture_output=True,
                             text=True, check=True)
        out[name] = float(res.stdout.strip().splitlines()[-1])
    return out


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--json", help="write the timings here")
    p.add_argument("--skip-training", action="store_true")
    args = p.parse_args(argv)

    res = {"kernels": kernel_timings(args.repeat)}
    if not args.skip_training:
        res["train_3_epochs"] = training_timings()
    print(f"{'kernel':<16}{'numpy [s]':>12}{'numba [s]':>12}{'speedup':>10}")
    for k in res["kernels"]["numpy"]:
        a, b = res["kernels"]["numpy"][k], res["kernels"]["numba"][k]
        print(f"{k:<16}{a:>12.4f}{b:>12.4f}{a / b:>10.1f}")
    if "train_3_epochs" in res:
        a, b = res["train_3_epochs"]["numpy"], res["train_3_epochs"]["numba"]
        print(f"{'train 3 epochs':<16}{a:>12.4f}{b:>12.4f}{a / b:>10.1f}")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(res, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
