"""Network runtime tests: layer math against finite differences, Adam
behavior, parameter file round-trips, and shape validation."""

import numpy as np
import pytest

from bridgesurvey import nn


def squared_loss(target):
    def loss(y):
        d = y - target
        return 0.5 * float(np.sum(d * d)), d
    return loss


def test_identity_dense_forward():
    spec = nn.NetworkSpec((3,), (nn.Dense(3, 3),))
    params = [{"w": np.eye(3), "b": np.zeros(3)}]
    x = np.array([1.0, -2.0, 0.5])
    y, _ = nn.forward(spec, params, x)
    assert np.array_equal(y, x)


def test_softmax_symmetric_logits_uniform():
    spec = nn.NetworkSpec((4,), (nn.Softmax(),))
    y, _ = nn.forward(spec, [{}], np.full(4, 2.5))
    assert np.allclose(y, 0.25, atol=1e-15)


def test_softmax_sums_to_one_and_nonnegative():
    spec = nn.NetworkSpec((7,), (nn.Softmax(),))
    rng = np.random.default_rng(3)
    for _ in range(50):
        y, _ = nn.forward(spec, [{}], rng.normal(scale=50, size=7))
        assert abs(y.sum() - 1.0) <= 1e-12
        assert np.all(y >= 0)


def test_conv_1x1_identity():
    spec = nn.NetworkSpec((1, 4, 4), (nn.Conv2D(1, 1, 1),))
    params = [{"w": np.ones((1, 1, 1, 1)), "b": np.zeros(1)}]
    x = np.arange(16.0).reshape(1, 4, 4)
    y, _ = nn.forward(spec, params, x)
    assert np.array_equal(y, x)


def test_dense_backward_matches_outer_product():
    spec = nn.NetworkSpec((3,), (nn.Dense(3, 2),))
    rng = np.random.default_rng(0)
    params = nn.init_params(spec, rng)
    x = rng.normal(size=(3,))
    g = rng.normal(size=(2,))
    _, cache = nn.forward(spec, params, x)
    grads, gx = nn.backward(cache, g)
    assert np.allclose(grads[0]["w"], np.outer(g, x), atol=1e-15)
    assert np.allclose(grads[0]["b"], g, atol=1e-15)
    assert np.allclose(gx, params[0]["w"].T @ g, atol=1e-15)


def test_relu_blocks_gradient_for_negative_preactivation():
    spec = nn.NetworkSpec((2,), (nn.Relu(),))
    x = np.array([-1.0, 2.0])
    _, cache = nn.forward(spec, [{}], x)
    _, gx = nn.backward(cache, np.ones(2))
    assert np.array_equal(gx, np.array([0.0, 1.0]))


def test_conv_gradient_matches_finite_differences_8x8():
    # single conv layer on a random 8x8 input, full-coordinate central FD
    spec = nn.NetworkSpec((1, 8, 8), (nn.Conv2D(1, 2, 3),))
    rng = np.random.default_rng(7)
    params = nn.init_params(spec, rng)
    x = rng.normal(size=(1, 8, 8))
    target = rng.normal(size=spec.output_shape)
    err = nn.gradient_check(spec, params, x, squared_loss(target), perturbation=1e-6)
    assert err <= 1e-5


def test_conv_stride_shape_and_gradient():
    spec = nn.NetworkSpec((2, 9, 9), (nn.Conv2D(2, 3, 3, stride=2),))
    assert spec.output_shape == (3, 4, 4)
    rng = np.random.default_rng(11)
    params = nn.init_params(spec, rng)
    x = rng.normal(size=(2, 9, 9))
    target = rng.normal(size=spec.output_shape)
    assert nn.gradient_check(spec, params, x, squared_loss(target)) <= 1e-5


def test_maxpool_crops_trailing_rows():
    spec = nn.NetworkSpec((1, 5, 5), (nn.MaxPool(2),))
    assert spec.output_shape == (1, 2, 2)
    x = np.arange(25.0).reshape(1, 5, 5)
    y, cache = nn.forward(spec, [{}], x)
    assert np.array_equal(y[0], np.array([[6.0, 8.0], [16.0, 18.0]]))
    _, gx = nn.backward(cache, np.ones((1, 2, 2)))
    assert gx[0, 4, :].sum() == 0  # cropped region gets no gradient
    assert gx.sum() == 4


def test_adam_first_step_magnitude():
    # fresh state, unit gradient: update is -lr * 1/(1 + eps), i.e. ~ -lr
    spec = nn.NetworkSpec((2,), (nn.Dense(2, 2),))
    params = nn.init_params(spec, np.random.default_rng(0))
    grads = [{"w": np.ones((2, 2)), "b": np.ones(2)}]
    state = nn.init_adam(params, lr=0.01)
    new = nn.adam_step(params, grads, state)
    step = params[0]["w"] - new[0]["w"]
    assert np.allclose(step, 0.01 / (1 + 1e-8), atol=1e-12)


def test_adam_zero_gradient_is_fixed_point():
    spec = nn.NetworkSpec((3,), (nn.Dense(3, 4),))
    params = nn.init_params(spec, np.random.default_rng(1))
    zero = [{"w": np.zeros((4, 3)), "b": np.zeros(4)}]
    state = nn.init_adam(params, lr=0.05)
    p = params
    for _ in range(3):
        p = nn.adam_step(p, zero, state)
    assert np.array_equal(p[0]["w"], params[0]["w"])
    assert np.array_equal(p[0]["b"], params[0]["b"])


def test_adam_minimizes_quadratic():
    # f(theta) = theta^2 from theta=1, 500 steps at lr 0.01 ends well inside 0.1
    spec = nn.NetworkSpec((1,), (nn.Dense(1, 1),))
    params = [{"w": np.array([[1.0]]), "b": np.zeros(1)}]
    state = nn.init_adam(params, lr=0.01)
    for _ in range(500):
        g = [{"w": 2.0 * params[0]["w"], "b": np.zeros(1)}]
        params = nn.adam_step(params, g, state)
    assert abs(params[0]["w"][0, 0]) < 0.1


def test_adam_rejects_nonfinite_gradient():
    spec = nn.NetworkSpec((2,), (nn.Dense(2, 1),))
    params = nn.init_params(spec, np.random.default_rng(0))
    bad = [{"w": np.array([[np.nan, 0.0]]), "b": np.zeros(1)}]
    state = nn.init_adam(params, lr=0.01)
    with pytest.raises(ValueError, match="layer 0"):
        nn.adam_step(params, bad, state)


def test_gradient_check_three_layer_mlp_seed0():
    spec = nn.NetworkSpec((4,), (nn.Dense(4, 8), nn.Relu(), nn.Dense(8, 2)))
    rng = np.random.default_rng(0)
    params = nn.init_params(spec, rng)
    x = rng.normal(size=(4,))
    target = rng.normal(size=(2,))
    assert nn.gradient_check(spec, params, x, squared_loss(target)) <= 1e-4


def test_gradient_check_all_zero_parameters():
    # smooth net (sigmoid, no relu kinks) with zero weights stays consistent
    spec = nn.NetworkSpec((3,), (nn.Dense(3, 4), nn.Sigmoid(), nn.Dense(4, 2)))
    params = [
        {"w": np.zeros((4, 3)), "b": np.zeros(4)},
        {},
        {"w": np.zeros((2, 4)), "b": np.zeros(2)},
    ]
    x = np.array([0.3, -0.8, 1.2])
    target = np.array([0.5, -0.25])
    assert nn.gradient_check(spec, params, x, squared_loss(target)) <= 1e-6


def layer_cases():
    return [
        ("dense", nn.NetworkSpec((5,), (nn.Dense(5, 4),)), 1e-4),
        ("conv", nn.NetworkSpec((2, 6, 6), (nn.Conv2D(2, 2, 3),)), 1e-3),
        ("pool", nn.NetworkSpec((1, 6, 6), (nn.MaxPool(2),)), 1e-3),
        ("relu", nn.NetworkSpec((6,), (nn.Dense(6, 5), nn.Relu())), 1e-3),
        ("sigmoid", nn.NetworkSpec((6,), (nn.Dense(6, 5), nn.Sigmoid())), 1e-3),
        ("softmax", nn.NetworkSpec((5,), (nn.Dense(5, 4), nn.Softmax())), 1e-3),
        ("flatten", nn.NetworkSpec((2, 3, 3), (nn.Flatten(), nn.Dense(18, 3))), 1e-3),
    ]


@pytest.mark.parametrize("name,spec,tol", layer_cases())
def test_every_layer_matches_finite_differences(name, spec, tol):
    # randomized property: 100 trials per layer type
    rng = np.random.default_rng(hash(name) % 2**32)
    for _ in range(100):
        params = nn.init_params(spec, rng)
        x = rng.normal(size=spec.input_shape)
        target = rng.normal(size=spec.output_shape)
        err = nn.gradient_check(spec, params, x, squared_loss(target))
        assert err <= tol, f"{name}: {err}"


def test_forward_is_deterministic_bitwise():
    spec = nn.NetworkSpec((1, 12, 12), (
        nn.Conv2D(1, 4, 3), nn.Relu(), nn.MaxPool(2), nn.Flatten(),
        nn.Dense(100, 3), nn.Softmax()))
    rng = np.random.default_rng(5)
    params = nn.init_params(spec, rng)
    x = rng.uniform(size=(1, 12, 12))
    y1, _ = nn.forward(spec, params, x)
    y2, _ = nn.forward(spec, params, x)
    assert np.array_equal(y1, y2)


def test_batched_forward_matches_single():
    spec = nn.NetworkSpec((4,), (nn.Dense(4, 3), nn.Relu(), nn.Dense(3, 2)))
    rng = np.random.default_rng(9)
    params = nn.init_params(spec, rng)
    xs = rng.normal(size=(6, 4))
    yb, _ = nn.forward(spec, params, xs)
    for i in range(6):
        yi, _ = nn.forward(spec, params, xs[i])
        assert np.allclose(yb[i], yi, atol=1e-15)


def test_spec_validation_names_layer_index():
    with pytest.raises(ValueError, match="layer 1"):
        nn.NetworkSpec((4,), (nn.Dense(4, 3), nn.Dense(4, 2)))
    with pytest.raises(ValueError, match="layer 0"):
        nn.NetworkSpec((3, 4, 4), (nn.Conv2D(1, 2, 3),))
    with pytest.raises(ValueError, match="layer 0"):
        nn.NetworkSpec((1, 2, 2), (nn.Conv2D(1, 2, 3),))
    with pytest.raises(ValueError, match="Flatten"):
        nn.NetworkSpec((2, 3, 3), (nn.Dense(9, 2),))


def test_forward_rejects_wrong_input_shape():
    spec = nn.NetworkSpec((4,), (nn.Dense(4, 2),))
    params = nn.init_params(spec, np.random.default_rng(0))
    with pytest.raises(ValueError, match="shape"):
        nn.forward(spec, params, np.zeros(5))


def test_param_roundtrip_bitwise(tmp_path):
    spec = nn.NetworkSpec((1, 10, 10), (
        nn.Conv2D(1, 3, 3), nn.Relu(), nn.MaxPool(2), nn.Flatten(), nn.Dense(48, 2)))
    params = nn.init_params(spec, np.random.default_rng(42))
    path = tmp_path / "net.params"
    nn.save_params(path, spec, params)
    loaded = nn.load_params(path, spec)
    for p, q in zip(params, loaded):
        assert set(p) == set(q)
        for k in p:
            assert np.array_equal(p[k], q[k])


def test_param_load_rejects_wrong_spec(tmp_path):
    spec = nn.NetworkSpec((4,), (nn.Dense(4, 2),))
    other = nn.NetworkSpec((4,), (nn.Dense(4, 3),))
    path = tmp_path / "net.params"
    nn.save_params(path, spec, nn.init_params(spec, np.random.default_rng(0)))
    with pytest.raises(nn.ParamFileError, match="fingerprint"):
        nn.load_params(path, other)


def test_param_load_rejects_corruption(tmp_path):
    spec = nn.NetworkSpec((4,), (nn.Dense(4, 2),))
    path = tmp_path / "net.params"
    nn.save_params(path, spec, nn.init_params(spec, np.random.default_rng(0)))
    blob = bytearray(path.read_bytes())
    blob[40] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(nn.ParamFileError, match="corrupt"):
        nn.load_params(path, spec)


def test_param_load_rejects_truncation(tmp_path):
    spec = nn.NetworkSpec((4,), (nn.Dense(4, 2),))
    path = tmp_path / "net.params"
    nn.save_params(path, spec, nn.init_params(spec, np.random.default_rng(0)))
    path.write_bytes(path.read_bytes()[:20])
    with pytest.raises(nn.ParamFileError):
        nn.load_params(path, spec)


def test_init_is_seed_reproducible():
    spec = nn.NetworkSpec((6,), (nn.Dense(6, 4), nn.Relu(), nn.Dense(4, 2)))
    a = nn.init_params(spec, np.random.default_rng(123))
    b = nn.init_params(spec, np.random.default_rng(123))
    for p, q in zip(a, b):
        for k in p:
            assert np.array_equal(p[k], q[k])
