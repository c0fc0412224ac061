import json

import numpy as np
import pytest

from hcr.diffnet import (
    NetworkConfig,
    NetworkParams,
    OptimizerState,
    backward,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
    sgd_momentum_step,
)
from hcr.exceptions import ConfigError, ShapeMismatch, ZeroVector
from hcr.geometry import project_to_sphere, sphere_backward
from hcr.losses import HcrConfig, ObjectiveConfig, composite_loss, cross_entropy

from gradcheck import numerical_gradient, relative_error


def small_config(**kw):
    base = dict(input_dim=4, encoder_widths=(8,), feature_dim=6, num_classes=3,
                projection_dim=3)
    base.update(kw)
    return NetworkConfig(**base)


def test_init_deterministic():
    a = init_params(small_config(), seed=3)
    b = init_params(small_config(), seed=3)
    for name in a:
        np.testing.assert_array_equal(a[name], b[name])
    c = init_params(small_config(), seed=4)
    assert not np.array_equal(a.flat(), c.flat())


def test_init_shapes_and_zero_biases():
    p = init_params(small_config(), seed=0)
    assert p["encoder.0.weight"].shape == (4, 8)
    assert p["encoder.1.weight"].shape == (8, 6)
    assert p["classifier.weight"].shape == (6, 3)
    assert p["projection.1.weight"].shape == (6, 3)
    for name in p:
        if name.endswith(".bias"):
            assert not p[name].any()


def test_init_weight_scale():
    p = init_params(NetworkConfig(input_dim=400, encoder_widths=(), feature_dim=50), seed=1)
    w = p["encoder.0.weight"]
    assert w.size >= 10**4
    assert abs(w.std() * np.sqrt(400) - 1) < 0.2
    assert abs(w.mean()) < 0.01


def test_config_validation():
    with pytest.raises(ConfigError):
        NetworkConfig(input_dim=3, activation="gelu")
    with pytest.raises(ConfigError):
        NetworkConfig(input_dim=3, projection_dim=1)
    with pytest.raises(ConfigError):
        NetworkConfig(input_dim=0)


def test_zero_params_raise_zero_vector():
    p = init_params(small_config(), seed=0)
    zeros = NetworkParams(p.config, {k: np.zeros_like(v) for k, v in p.arrays.items()})
    with pytest.raises(ZeroVector):
        forward(zeros, np.ones((2, 4)))


def test_forward_shape_mismatch():
    p = init_params(small_config(), seed=0)
    with pytest.raises(ShapeMismatch):
        forward(p, np.ones((2, 5)))


def test_forward_hand_computed():
    cfg = NetworkConfig(input_dim=2, encoder_widths=(), feature_dim=2, num_classes=2,
                        projection_dim=2, activation="relu")
    arrays = {
        "encoder.0.weight": np.array([[1.0, 0.0], [0.0, 1.0]]),
        "encoder.0.bias": np.array([0.5, -0.25]),
        "classifier.weight": np.array([[2.0, -1.0], [0.5, 3.0]]),
        "classifier.bias": np.array([0.1, 0.2]),
        "projection.0.weight": np.array([[1.0, -2.0], [0.0, 1.0]]),
        "projection.0.bias": np.zeros(2),
        "projection.1.weight": np.array([[1.0, 1.0], [0.0, 2.0]]),
        "projection.1.bias": np.zeros(2),
    }
    p = NetworkParams(cfg, arrays)
    x = [1.0, 2.0]
    h = [x[0] + 0.5, x[1] - 0.25]
    logits = [2.0 * h[0] + 0.5 * h[1] + 0.1, -1.0 * h[0] + 3.0 * h[1] + 0.2]
    a = [max(h[0], 0.0), max(-2.0 * h[0] + h[1], 0.0)]
    assert a[1] == 0.0
    raw = [a[0], a[0] + 2.0 * a[1]]
    norm = (raw[0] ** 2 + raw[1] ** 2) ** 0.5
    rec = forward(p, np.array([x]))
    np.testing.assert_allclose(rec.features[0], h, atol=1e-12)
    np.testing.assert_allclose(rec.logits[0], logits, atol=1e-12)
    np.testing.assert_allclose(rec.projections[0], [raw[0] / norm, raw[1] / norm], atol=1e-12)


def test_batch_row_independence():
    p = init_params(small_config(), seed=2)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 4))
    both = forward(p, x)
    one = forward(p, x[:1])
    # BLAS may take a different kernel for a single row, so allow 1-ulp drift
    np.testing.assert_allclose(one.logits[0], both.logits[0], rtol=1e-14, atol=1e-16)
    np.testing.assert_allclose(one.projections[0], both.projections[0], rtol=1e-14, atol=1e-16)
    again = forward(p, x)
    np.testing.assert_array_equal(again.logits, both.logits)


def test_zero_upstream_gives_zero_gradients():
    p = init_params(small_config(), seed=2)
    rec = forward(p, np.random.default_rng(1).standard_normal((3, 4)))
    grads = backward(p, rec, np.zeros_like(rec.logits), np.zeros_like(rec.projections),
                     np.zeros_like(rec.features))
    assert all(not g.any() for g in grads.values())
    assert set(grads) == set(p.arrays)


def test_backward_shape_mismatch():
    p = init_params(small_config(), seed=2)
    rec = forward(p, np.ones((3, 4)))
    with pytest.raises(ShapeMismatch):
        backward(p, rec, grad_logits=np.zeros((3, 2)))


def test_tangent_property():
    rng = np.random.default_rng(3)
    v = rng.standard_normal((5, 4))
    u = project_to_sphere(v)
    g = sphere_backward(v, u * rng.uniform(1, 10, (5, 1)))
    assert np.max(np.abs(g)) < 1e-9


def _fd_network(p, loss, scale_check=1e-5):
    analytic = loss(True)
    for name, arr in p.arrays.items():
        num = numerical_gradient(loss, arr)
        assert relative_error(analytic[name], num) < scale_check, name


def test_tiny_network_finite_differences():
    cfg = NetworkConfig(input_dim=2, encoder_widths=(), feature_dim=2, num_classes=2,
                        projection_dim=2, projection_hidden=2, activation="tanh")
    p = init_params(cfg, seed=5)
    rng = np.random.default_rng(5)
    x = rng.standard_normal((3, 2))
    w_l, w_p = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))

    def loss(grads=False):
        rec = forward(p, x)
        value = np.sum(w_l * rec.logits) + np.sum(w_p * rec.projections)
        return backward(p, rec, w_l, w_p) if grads else float(value)

    _fd_network(p, loss)


@pytest.mark.parametrize("activation", ["relu", "tanh"])
def test_end_to_end_composite_finite_differences(activation):
    cfg = NetworkConfig(input_dim=5, encoder_widths=(7, 6), feature_dim=5, num_classes=3,
                        projection_dim=4, activation=activation)
    p = init_params(cfg, seed=11)
    rng = np.random.default_rng(11)
    x1 = rng.standard_normal((16, 5))
    x2 = x1 + 0.1 * rng.standard_normal(x1.shape)
    y = rng.integers(0, 3, 16)
    mask = rng.random(16) < 0.5
    obj = ObjectiveConfig(hcr=HcrConfig(gradient_flow="both"), tau=0.5)

    def loss(grads=False):
        r1, r2 = forward(p, x1), forward(p, x2)
        out = composite_loss(r1.logits, r1.projections, y, mask, obj, keys=r2.projections)
        if not grads:
            return out.value
        g = backward(p, r1, out.grads["logits"], out.grads["projections"])
        g2 = backward(p, r2, grad_projections=out.grads["keys"])
        return {k: g[k] + g2[k] for k in g}

    _fd_network(p, loss)


def test_sgd_plain_step():
    p = init_params(small_config(), seed=0)
    before = p.copy()
    grads = {k: np.ones_like(v) for k, v in p.arrays.items()}
    sgd_momentum_step(p, grads, OptimizerState(0.1, 0.0))
    for k in p:
        np.testing.assert_allclose(p[k], before[k] - 0.1, atol=1e-15)


def test_sgd_zero_gradient_uses_velocity():
    p = init_params(small_config(), seed=0)
    before = p.copy()
    state = OptimizerState(0.1, 0.9, {k: np.full_like(v, 2.0) for k, v in p.arrays.items()})
    sgd_momentum_step(p, {k: np.zeros_like(v) for k, v in p.arrays.items()}, state)
    for k in p:
        np.testing.assert_allclose(p[k], before[k] - 0.1 * 0.9 * 2.0, atol=1e-15)


def test_sgd_two_steps_displacement():
    lr, m = 0.05, 0.9
    p = init_params(small_config(), seed=0)
    before = p.copy()
    g = {k: np.random.default_rng(1).standard_normal(v.shape) for k, v in p.arrays.items()}
    state = OptimizerState(lr, m)
    sgd_momentum_step(p, g, state)
    sgd_momentum_step(p, g, state)
    for k in p:
        np.testing.assert_allclose(p[k] - before[k], -lr * (2 + m) * g[k], atol=1e-14)


def test_optimizer_validation():
    with pytest.raises(ConfigError):
        OptimizerState(0.0)
    with pytest.raises(ConfigError):
        OptimizerState(0.1, 1.0)


def test_convex_step_decreases_loss():
    # classifier head on fixed features: cross entropy is convex in its params
    cfg = NetworkConfig(input_dim=2, encoder_widths=(), feature_dim=3, num_classes=2,
                        projection_dim=2, activation="tanh")
    p = init_params(cfg, seed=6)
    rng = np.random.default_rng(6)
    x = rng.standard_normal((20, 2))
    y = (x[:, 0] > 0).astype(int)
    rec = forward(p, x)
    before = cross_entropy(rec.logits, y)
    grads = backward(p, rec, grad_logits=before.grads["logits"])
    head_only = {k: (g if k.startswith("classifier") else np.zeros_like(g))
                 for k, g in grads.items()}
    sgd_momentum_step(p, head_only, OptimizerState(0.01, 0.9))
    after = cross_entropy(forward(p, x).logits, y)
    assert after.value < before.value


@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_checkpoint_round_trip(tmp_path, dtype):
    p = init_params(small_config(activation="tanh"), seed=9, dtype=dtype)
    path = tmp_path / "ckpt.json"
    save_checkpoint(p, path)
    q = load_checkpoint(path)
    assert q.config == p.config
    for k in p:
        assert q[k].dtype == p[k].dtype
        np.testing.assert_array_equal(q[k], p[k])
    assert json.loads(path.read_text())["format"] == "hcr-checkpoint"


def test_checkpoint_rejects_foreign_json(tmp_path):
    path = tmp_path / "other.json"
    path.write_text('{"format": "something-else"}')
    with pytest.raises(ValueError):
        load_checkpoint(path)
