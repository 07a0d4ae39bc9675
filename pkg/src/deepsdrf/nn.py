"""Small sequence regressor: optional GRU encoder, tanh dense stack, linear or
sigmoid head, trained by mini-batch backpropagation.

Inputs are history windows ``x[B, u, F]`` with an input-step mask ``[B, u]``
(masked steps carry the recurrent state through) and per-row loss weights
``[B]`` (a zero weight removes the row from the loss).

All parameters live in one flat float64 vector; layer weights are views into
it, so optimizers, checkpoints and gradient checks work on a single array.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOSS_KINDS = ("mse", "cde", "bce")
_EPS = 1e-12


class TrainingDivergence(RuntimeError):
    """Raised when the training loss becomes non-finite."""


@dataclass
class NetConfig:
    n_features: int
    n_outputs: int = 1
    history_u: int = 1
    dense_layers: int = 2
    dense_units: int = 8
    recurrent_units: int = 8
    batch_size: int = 128
    learning_rate: float = 0.01
    epochs: int = 50
    seed: int = 0
    output_head: str = "sigmoid"  # "sigmoid" or "vector"
    optimizer: str = "sgd"  # "sgd" or "adam"

    def __post_init__(self):
        for name in ("n_features", "n_outputs", "history_u", "batch_size", "epochs"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        # zero recurrent units / dense layers give the linear variants
        if self.dense_layers < 0 or self.recurrent_units < 0:
            raise ValueError("dense_layers and recurrent_units must be >= 0")
        if self.dense_layers > 0 and self.dense_units < 1:
            raise ValueError("dense_units must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.output_head not in ("sigmoid", "vector"):
            raise ValueError(f"unknown output_head {self.output_head!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def replace(self, **changes) -> "NetConfig":
        d = asdict(self)
        d.update(changes)
        return NetConfig(**d)


def _layer_shapes(cfg: NetConfig):
    """Ordered (name, shape, fan_in) for every parameter block."""
    shapes = []
    R = cfg.recurrent_units
    if R > 0:
        width = R
        shapes += [
            ("gru_W", (cfg.n_features, 3 * R), cfg.n_features),
            ("gru_U", (R, 3 * R), R),
            ("gru_b", (3 * R,), None),
        ]
    else:
        width = cfg.n_features * cfg.history_u
    for k in range(cfg.dense_layers):
        shapes += [
            (f"dense{k}_W", (width, cfg.dense_units), width),
            (f"dense{k}_b", (cfg.dense_units,), None),
        ]
        width = cfg.dense_units
    shapes += [("out_W", (width, cfg.n_outputs), width), ("out_b", (cfg.n_outputs,), None)]
    return shapes


class Network:
    def __init__(self, cfg: NetConfig, params: np.ndarray | None = None):
        self.cfg = cfg
        self._shapes = _layer_shapes(cfg)
        size = sum(int(np.prod(s)) for _, s, _ in self._shapes)
        if params is None:
            params = self._init_params(size)
        params = np.array(params, dtype=np.float64)
        if params.shape != (size,):
            raise ValueError(f"expected {size} parameters, got {params.shape}")
        self.params = params
        self.p = self._views(self.params)
        self.loss_history: list[float] = []

    def _init_params(self, size):
        rng = np.random.default_rng(self.cfg.seed)
        flat = np.zeros(size)
        views = self._views(flat)
        for name, shape, fan_in in self._shapes:
            if fan_in is not None:
                bound = 1.0 / np.sqrt(fan_in)
                views[name][...] = rng.uniform(-bound, bound, size=shape)
        return flat

    def _views(self, flat):
        out, i = {}, 0
        for name, shape, _ in self._shapes:
            k = int(np.prod(shape))
            out[name] = flat[i : i + k].reshape(shape)
            i += k
        return out

    @property
    def n_params(self) -> int:
        return self.params.size

    # -- forward / backward -------------------------------------------------

    def _check_inputs(self, x, mask):
        x = np.ascontiguousarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[1:] != (self.cfg.history_u, self.cfg.n_features):
            raise ValueError(
                f"inputs must have shape (B, {self.cfg.history_u}, {self.cfg.n_features}), "
                f"got {x.shape}"
            )
        if mask is None:
            mask = np.ones(x.shape[:2])
        mask = np.ascontiguousarray(mask, dtype=np.float64)
        if mask.shape != x.shape[:2]:
            raise ValueError(f"mask shape {mask.shape} does not match inputs {x.shape[:2]}")
        return x, mask

    def _forward(self, x, mask):
        p, cfg = self.p, self.cfg
        cache = {}
        if cfg.recurrent_units > 0:
            hs, z, r, n = kernels.gru_forward(x, mask, p["gru_W"], p["gru_U"], p["gru_b"])
            cache["gru"] = (hs, z, r, n)
            act = hs[:, -1]
        else:
            act = (x * mask[:, :, None]).reshape(x.shape[0], -1)
        acts = [act]
        for k in range(cfg.dense_layers):
            act = np.tanh(act @ p[f"dense{k}_W"] + p[f"dense{k}_b"])
            acts.append(act)
        out = act @ p["out_W"] + p["out_b"]
        if cfg.output_head == "sigmoid":
            out = kernels._sigmoid(out.ravel()).reshape(out.shape)
        cache["acts"] = acts
        return out, cache

    def forward(self, x, mask=None) -> np.ndarray:
        """Outputs ``[B, n_outputs]``; the sigmoid head lies in (0, 1)."""
        x, mask = self._check_inputs(x, mask)
        return self._forward(x, mask)[0]

    def predict(self, x, mask=None, chunk: int = 65536) -> np.ndarray:
        x, mask = self._check_inputs(x, mask)
        if x.shape[0] <= chunk:
            return self._forward(x, mask)[0]
        return np.concatenate(
            [self._forward(x[i : i + chunk], mask[i : i + chunk])[0] for i in range(0, len(x), chunk)]
        )

    def loss_and_grad(self, x, y, weights=None, mask=None, loss_kind="mse", scale=1.0):
        """Weighted mean loss over rows and its gradient w.r.t. ``params``.

        ``cde`` expects ``y`` to hold basis values at the observed treatment;
        the per-row loss is ``(sum(beta**2) - 2 * beta . y) * scale``.
        """
        x, mask = self._check_inputs(x, mask)
        out, cache = self._forward(x, mask)
        y = np.asarray(y, dtype=np.float64).reshape(out.shape)
        w = np.ones(len(x)) if weights is None else np.asarray(weights, dtype=np.float64)
        denom = max(w.sum(), 1.0)
        if loss_kind == "mse":
            res = out - y
            per_row = (res**2).mean(axis=1)
            dout = 2.0 * res / out.shape[1]
        elif loss_kind == "cde":
            per_row = scale * ((out**2).sum(axis=1) - 2.0 * (out * y).sum(axis=1))
            dout = scale * (2.0 * out - 2.0 * y)
        elif loss_kind == "bce":
            if self.cfg.output_head != "sigmoid":
                raise ValueError("bce loss needs the sigmoid head")
            pc = np.clip(out, _EPS, 1.0 - _EPS)
            per_row = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)).sum(axis=1)
            # combined sigmoid + cross-entropy derivative w.r.t. the logit
            dout = out - y
        else:
            raise ValueError(f"unknown loss kind {loss_kind!r}")
        loss = float((w * per_row).sum() / denom)
        dout = dout * (w / denom)[:, None]
        if self.cfg.output_head == "sigmoid" and loss_kind != "bce":
            dout = dout * out * (1.0 - out)
        return loss, self._backward(x, mask, cache, dout)

    def _backward(self, x, mask, cache, dout):
        p, cfg = self.p, self.cfg
        grad = np.zeros_like(self.params)
        g = self._views(grad)
        acts = cache["acts"]
        g["out_W"][...] = acts[-1].T @ dout
        g["out_b"][...] = dout.sum(axis=0)
        d = dout @ p["out_W"].T
        for k in range(cfg.dense_layers - 1, -1, -1):
            d = d * (1.0 - acts[k + 1] ** 2)
            g[f"dense{k}_W"][...] = acts[k].T @ d
            g[f"dense{k}_b"][...] = d.sum(axis=0)
            d = d @ p[f"dense{k}_W"].T
        if cfg.recurrent_units > 0:
            hs, z, r, n = cache["gru"]
            dW, dU, db = kernels.gru_backward(
                x, mask, p["gru_W"], p["gru_U"], hs, z, r, n, np.ascontiguousarray(d)
            )
            g["gru_W"][...] = dW
            g["gru_U"][...] = dU
            g["gru_b"][...] = db
        return grad

    def loss(self, x, y, weights=None, mask=None, loss_kind="mse", scale=1.0, chunk=65536):
        x, mask = self._check_inputs(x, mask)
        w = np.ones(len(x)) if weights is None else np.asarray(weights, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64).reshape(len(x), -1)
        total = 0.0
        for i in range(0, len(x), chunk):
            sl = slice(i, i + chunk)
            out = self._forward(x[sl], mask[sl])[0]
            total += float((w[sl] * _row_loss(out, y[sl], loss_kind, scale)).sum())
        return total / max(w.sum(), 1.0)

    # -- persistence ----------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.cfg),
            "params": self.params.tolist(),
            "loss_history": list(self.loss_history),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Network":
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('version')!r}")
        net = cls(NetConfig(**d["config"]), np.asarray(d["params"], dtype=np.float64))
        net.loss_history = list(d.get("loss_history", []))
        return net

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "Network":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _row_loss(out, y, loss_kind, scale):
    if loss_kind == "mse":
        return ((out - y) ** 2).mean(axis=1)
    if loss_kind == "cde":
        return scale * ((out**2).sum(axis=1) - 2.0 * (out * y).sum(axis=1))
    if loss_kind == "bce":
        pc = np.clip(out, _EPS, 1.0 - _EPS)
        return -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)).sum(axis=1)
    raise ValueError(f"unknown loss kind {loss_kind!r}")


def init(cfg: NetConfig) -> Network:
    return Network(cfg)


def forward(net: Network, inputs, mask=None) -> np.ndarray:
    return net.forward(inputs, mask)


@dataclass
class _Adam:
    lr: float
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)
    t: int = 0

    def step(self, params, grad):
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        params -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def train(
    net: Network,
    x,
    y,
    weights=None,
    mask=None,
    loss_kind: str = "mse",
    scale: float = 1.0,
) -> Network:
    """Mini-batch training in place; returns ``net``.

    The parameters with the lowest full-data loss seen at an epoch boundary
    are kept, so the final loss never exceeds the initial one.
    ``net.loss_history`` records the initial loss and one entry per epoch.
    """
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    x, mask = net._check_inputs(x, mask)
    n = len(x)
    if n == 0:
        raise ValueError("empty dataset")
    y = np.asarray(y, dtype=np.float64).reshape(n, -1)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    cfg = net.cfg
    rng = np.random.default_rng([cfg.seed, 1])
    opt = _Adam(cfg.learning_rate) if cfg.optimizer == "adam" else None

    best = net.loss(x, y, w, mask, loss_kind, scale)
    if not np.isfinite(best):
        raise TrainingDivergence(f"initial loss is not finite ({best})")
    best_params = net.params.copy()
    history = [best]
    bs = min(cfg.batch_size, n)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for i in range(0, n, bs):
            idx = order[i : i + bs]
            loss, grad = net.loss_and_grad(x[idx], y[idx], w[idx], mask[idx], loss_kind, scale)
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise TrainingDivergence(
                    f"non-finite loss {loss} at epoch {epoch}, batch {i // bs}"
                )
            if opt is None:
                net.params -= cfg.learning_rate * grad
            else:
                opt.step(net.params, grad)
        ep_loss = net.loss(x, y, w, mask, loss_kind, scale)
        if not np.isfinite(ep_loss):
            raise TrainingDivergence(f"non-finite loss {ep_loss} after epoch {epoch}")
        history.append(ep_loss)
        if ep_loss <= best:
            best = ep_loss
            best_params = net.params.copy()
    net.params[...] = best_params
    net.loss_history = history
    logger.debug("trained %d params: loss %.5g -> %.5g", net.n_params, history[0], best)
    return net


def gradient_check(net: Network, x, y, weights=None, mask=None, loss_kind="mse",
                   step: float = 1e-5, atol: float = 1e-7) -> float:
    """Max relative error between backprop and central finite differences.

    Relative error is ``|g_bp - g_fd| / max(|g_bp|, |g_fd|, atol)``; the floor
    keeps parameters with vanishing gradient from dominating on round-off.
    """
    _, grad = net.loss_and_grad(x, y, weights, mask, loss_kind)
    saved = net.params.copy()
    fd = np.empty_like(grad)
    try:
        for i in range(net.n_params):
            net.params[i] = saved[i] + step
            lp = net.loss_and_grad(x, y, weights, mask, loss_kind)[0]
            net.params[i] = saved[i] - step
            lm = net.loss_and_grad(x, y, weights, mask, loss_kind)[0]
            net.params[i] = saved[i]
            fd[i] = (lp - lm) / (2.0 * step)
    finally:
        net.params[...] = saved
    denom = np.maximum(np.maximum(np.abs(grad), np.abs(fd)), atol)
    return float(np.max(np.abs(grad - fd) / denom))
