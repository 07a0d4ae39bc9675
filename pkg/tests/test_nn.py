import os
import subprocess
import sys

import numpy as np
import pytest

from deepsdrf import kernels, nn


def _data(seed, B=6, u=3, F=4, out=2):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(B, u, F))
    mask = np.ones((B, u))
    mask[0, 0] = 0.0
    mask[1, :2] = 0.0
    y = rng.normal(size=(B, out))
    return x, mask, y


def test_init_is_deterministic():
    cfg = nn.NetConfig(n_features=3, seed=5)
    assert np.array_equal(nn.init(cfg).params, nn.init(cfg).params)
    assert not np.array_equal(nn.init(cfg).params, nn.init(cfg.replace(seed=6)).params)


def test_init_bound_from_fan_in():
    cfg = nn.NetConfig(n_features=4, recurrent_units=0, dense_layers=0, n_outputs=50, output_head="vector")
    W = nn.init(cfg).p["out_W"]
    assert np.all(np.abs(W) <= 0.5)
    assert np.abs(W).max() > 0.4


@pytest.mark.parametrize(
    "kw",
    [dict(n_features=0), dict(n_features=2, learning_rate=0.0), dict(n_features=2, batch_size=0),
     dict(n_features=2, output_head="softmax"), dict(n_features=2, optimizer="rmsprop")],
)
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        nn.NetConfig(**kw)


def test_shape_mismatch_rejected():
    net = nn.init(nn.NetConfig(n_features=3, history_u=2))
    with pytest.raises(ValueError):
        net.forward(np.zeros((4, 3, 3)))
    with pytest.raises(ValueError):
        net.forward(np.zeros((4, 2, 3)), np.ones((4, 3)))


def test_sigmoid_head_in_open_unit_interval():
    net = nn.init(nn.NetConfig(n_features=3, history_u=2, seed=1))
    out = net.forward(np.random.default_rng(0).normal(scale=50, size=(200, 2, 3)))
    assert np.all((out > 0) & (out < 1))


def test_single_linear_layer_output():
    cfg = nn.NetConfig(n_features=1, dense_layers=0, recurrent_units=0, output_head="vector")
    net = nn.init(cfg)
    net.p["out_W"][...] = 1.7
    out = net.forward(np.array([[[2.0]], [[-3.0]]]))
    assert np.allclose(out[:, 0], [3.4, -5.1], atol=1e-15)


def test_zero_weight_rows_contribute_nothing():
    x, mask, y = _data(0)
    net = nn.init(nn.NetConfig(n_features=4, history_u=3, n_outputs=2, output_head="vector"))
    loss, grad = net.loss_and_grad(x, y, weights=np.zeros(len(x)), mask=mask)
    assert loss == 0.0
    assert np.all(grad == 0.0)


def test_masked_inputs_do_not_matter():
    x, mask, y = _data(1)
    net = nn.init(nn.NetConfig(n_features=4, history_u=3, n_outputs=2, output_head="vector", seed=2))
    l1, g1 = net.loss_and_grad(x, y, mask=mask)
    x2 = x.copy()
    x2[mask == 0] = 1e3
    l2, g2 = net.loss_and_grad(x2, y, mask=mask)
    assert l1 == l2
    assert np.array_equal(g1, g2)


def test_fully_masked_window_gives_zero_input_gradient():
    cfg = nn.NetConfig(n_features=2, history_u=3, n_outputs=1, output_head="vector", seed=3)
    net = nn.init(cfg)
    x = np.random.default_rng(0).normal(size=(5, 3, 2))
    _, grad = net.loss_and_grad(x, np.ones((5, 1)), mask=np.zeros((5, 3)))
    g = net._views(grad)
    assert np.all(g["gru_W"] == 0.0)
    assert np.all(g["gru_U"] == 0.0)


@pytest.mark.parametrize("loss_kind", ["mse", "cde", "bce"])
def test_gradient_check_gru(loss_kind):
    x, mask, y = _data(2)
    head = "sigmoid" if loss_kind == "bce" else "vector"
    if loss_kind == "bce":
        y = (y > 0).astype(float)
    cfg = nn.NetConfig(n_features=4, history_u=3, n_outputs=2, recurrent_units=3, dense_layers=2,
                       dense_units=3, output_head=head, seed=7)
    assert nn.gradient_check(nn.init(cfg), x, y, mask=mask, loss_kind=loss_kind) < 1e-4


def test_gradient_check_linear():
    x, mask, y = _data(3, u=1)
    cfg = nn.NetConfig(n_features=4, n_outputs=2, recurrent_units=0, dense_layers=0, output_head="vector")
    assert nn.gradient_check(nn.init(cfg), x, y, mask=mask[:, :1]) < 1e-6


def test_backends_agree():
    rng = np.random.default_rng(4)
    B, T, F, R = 7, 4, 3, 5
    x = rng.normal(size=(B, T, F))
    mask = (rng.uniform(size=(B, T)) > 0.3).astype(float)
    W, U, b = rng.normal(size=(F, 3 * R)), rng.normal(size=(R, 3 * R)), rng.normal(size=3 * R)
    fa = kernels.gru_forward_numpy(x, mask, W, U, b)
    fb = kernels.gru_forward_numba(x, mask, W, U, b)
    for a, c in zip(fa, fb):
        assert np.allclose(a, c, atol=1e-13)
    dh = rng.normal(size=(B, R))
    ba = kernels.gru_backward_numpy(x, mask, W, U, *fa, dh)
    bb = kernels.gru_backward_numba(x, mask, W, U, *fb, dh)
    for a, c in zip(ba, bb):
        assert np.allclose(a, c, atol=1e-12)


def test_linear_fit_recovers_slope():
    rng = np.random.default_rng(0)
    u = rng.uniform(-1, 1, size=(400, 1, 1))
    y = 2.0 * u[:, 0]
    cfg = nn.NetConfig(n_features=1, dense_layers=0, recurrent_units=0, output_head="vector",
                       learning_rate=0.1, epochs=200, batch_size=50)
    net = nn.train(nn.init(cfg), u, y)
    assert net.p["out_W"][0, 0] == pytest.approx(2.0, abs=1e-3)


def test_constant_target_regression():
    x = np.random.default_rng(1).normal(size=(300, 1, 2))
    cfg = nn.NetConfig(n_features=2, recurrent_units=0, dense_layers=1, dense_units=3,
                       output_head="vector", optimizer="adam", epochs=100)
    net = nn.train(nn.init(cfg), x, np.full((300, 1), 0.7))
    assert net.loss_history[-1] < 1e-4


def test_training_never_ends_above_initial_loss():
    x, mask, y = _data(5, B=64)
    cfg = nn.NetConfig(n_features=4, history_u=3, n_outputs=2, output_head="vector",
                       learning_rate=5.0, epochs=5, batch_size=8)
    net = nn.init(cfg)
    try:
        nn.train(net, x, y, mask=mask)
    except nn.TrainingDivergence:
        return
    assert net.loss(x, y, mask=mask) <= net.loss_history[0]
    assert len(net.loss_history) == cfg.epochs + 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises():
    x = np.ones((10, 1, 1))
    cfg = nn.NetConfig(n_features=1, dense_layers=0, recurrent_units=0, output_head="vector",
                       learning_rate=1e200, epochs=3)
    with pytest.raises(nn.TrainingDivergence):
        nn.train(nn.init(cfg), x, np.full((10, 1), 1e200))


def test_training_is_deterministic():
    x, mask, y = _data(6, B=40)
    cfg = nn.NetConfig(n_features=4, history_u=3, n_outputs=2, output_head="vector", epochs=3, batch_size=16)
    a = nn.train(nn.init(cfg), x, y, mask=mask)
    b = nn.train(nn.init(cfg), x, y, mask=mask)
    assert np.array_equal(a.params, b.params)


def test_cde_loss_decreases_on_uniform_toy():
    from deepsdrf.gps import basis_unit

    rng = np.random.default_rng(0)
    x = rng.normal(size=(500, 1, 2))
    z = rng.uniform(size=500)
    cfg = nn.NetConfig(n_features=2, n_outputs=8, recurrent_units=0, output_head="vector",
                       epochs=5, learning_rate=0.01)
    net = nn.train(nn.init(cfg), x, basis_unit("cosine", z, 8), loss_kind="cde")
    assert np.all(np.diff(net.loss_history) < 0)


def test_checkpoint_roundtrip(tmp_path):
    cfg = nn.NetConfig(n_features=3, history_u=2, seed=4)
    net = nn.init(cfg)
    net.loss_history = [1.0, 0.5]
    path = tmp_path / "net.json"
    net.save(path)
    back = nn.Network.load(path)
    assert back.cfg == cfg
    assert np.array_equal(back.params, net.params)
    assert back.loss_history == [1.0, 0.5]


def test_checkpoint_version_checked():
    d = nn.init(nn.NetConfig(n_features=1)).to_dict()
    d["version"] = 99
    with pytest.raises(ValueError):
        nn.Network.from_dict(d)


@pytest.mark.parametrize("flag, expected", [("numpy", "numpy"), ("numba", "numba")])
def test_backend_env_flag(flag, expected):
    code = "from deepsdrf import kernels; print(kernels.BACKEND, kernels.td_sweep.__name__)"
    res = subprocess.run([sys.executable, "-c", code], env=dict(os.environ, DEEPSDRF_BACKEND=flag),
                         capture_output=True, text=True, check=True)
    backend, fn = res.stdout.split()
    assert backend == expected and fn.endswith(expected)


def test_backend_env_flag_rejects_unknown():
    res = subprocess.run([sys.executable, "-c", "import deepsdrf.kernels"],
                         env=dict(os.environ, DEEPSDRF_BACKEND="cuda"), capture_output=True, text=True)
    assert res.returncode != 0 and "DEEPSDRF_BACKEND" in res.stderr
