import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from microcl import autodiff as ad
from microcl.autodiff import LayerSpec
from microcl.networks import build_extractor, build_head


# -- naive oracles ----------------------------------------------------------

def naive_conv(x, w, b):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.zeros((n, o, h, wd))
    for ni in range(n):
        for oi in range(o):
            for i in range(h):
                for j in range(wd):
                    out[ni, oi, i, j] = np.sum(xp[ni, :, i:i + k, j:j + k] * w[oi]) + b[oi]
    return out


def naive_maxpool(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // 2, w // 2))
    for i in range(h // 2):
        for j in range(w // 2):
            out[:, :, i, j] = x[:, :, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max(axis=(2, 3))
    return out


def naive_dense(x, w, b):
    return np.array([[sum(x[n, i] * w[i, j] for i in range(w.shape[0])) + b[j]
                      for j in range(w.shape[1])] for n in range(x.shape[0])])


def small_cnn():
    return [
        LayerSpec("conv2d", "c1", in_channels=2, out_channels=3),
        LayerSpec("relu", "r1"),
        LayerSpec("maxpool2d", "p1", kernel=2),
        LayerSpec("conv2d", "c2", in_channels=3, out_channels=4),
        LayerSpec("relu", "r2"),
        LayerSpec("avgpool-global", "gap"),
        LayerSpec("dense", "d1", in_channels=4, units=5),
        LayerSpec("ksparse", "ks", k_percent=40),
        LayerSpec("dense", "d2", in_channels=5, units=3),
    ]


# -- forward ----------------------------------------------------------------

def test_identity_1x1_conv():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 5, 5))
    w = np.eye(3).reshape(3, 3, 1, 1)
    out, _ = ad.conv2d_forward(x, w, np.zeros(3))
    np.testing.assert_array_equal(out, x)


def test_relu_definition():
    out, _ = ad.relu_forward(np.array([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(out, [0, 0, 2])


def test_forward_matches_naive_loops():
    rng = np.random.default_rng(1)
    net = [
        LayerSpec("conv2d", "c1", in_channels=2, out_channels=3),
        LayerSpec("relu", "r1"),
        LayerSpec("maxpool2d", "p1", kernel=2),
        LayerSpec("avgpool-global", "gap"),
        LayerSpec("dense", "d1", in_channels=3, units=4),
    ]
    params = ad.init_params(net, 3, np.float64)
    params["c1.bias"][:] = rng.normal(size=3)
    x = rng.normal(size=(2, 2, 6, 6))
    out, _ = ad.forward(net, params, x)
    h = naive_conv(x, params["c1.weight"], params["c1.bias"])
    h = naive_maxpool(np.maximum(h, 0)).mean(axis=(2, 3))
    expected = naive_dense(h, params["d1.weight"], params["d1.bias"])
    np.testing.assert_allclose(out, expected, rtol=1e-6, atol=1e-12)


def test_forward_shape_mismatch():
    net = small_cnn()
    params = ad.init_params(net, 0, np.float64)
    with pytest.raises(ad.ShapeError):
        ad.forward(net, params, np.zeros((1, 3, 8, 8)))


def test_forward_non_finite():
    net = small_cnn()
    params = ad.init_params(net, 0, np.float64)
    x = np.zeros((1, 2, 8, 8))
    x[0, 0, 0, 0] = np.nan
    with pytest.raises(ad.NonFiniteError):
        ad.forward(net, params, x)


def test_forward_is_deterministic():
    net = build_extractor(3, 4, 16)
    params = ad.init_params(net, 5)
    x = np.random.default_rng(0).uniform(size=(3, 3, 32, 32)).astype(np.float32)
    a, _ = ad.forward(net, params, x)
    b, _ = ad.forward(net, params, x)
    assert a.tobytes() == b.tobytes()


def test_output_shapes_follow_stage_table():
    net = build_extractor(3, 16, 128)
    shapes = ad.output_shape(net, (3, 64, 64))
    assert shapes["stage1_relu"] == (16, 64, 64)
    assert shapes["stage4_relu"] == (128, 8, 8)
    assert shapes["stage5_relu"] == (128, 4, 4)
    assert shapes["gap"] == (128,)


# -- backward ---------------------------------------------------------------

def test_zero_upstream_gives_zero_grads():
    net = small_cnn()
    params = ad.init_params(net, 0, np.float64)
    x = np.random.default_rng(0).normal(size=(2, 2, 8, 8))
    out, tape = ad.forward(net, params, x, record=True)
    _, grads = ad.backward(tape, np.zeros_like(out))
    assert set(grads) == set(params)
    for k, g in grads.items():
        assert g.shape == params[k].shape
        assert not g.any()


def test_single_dense_scalar_output():
    net = [LayerSpec("dense", "d", in_channels=4, units=1)]
    params = ad.init_params(net, 0, np.float64)
    x = np.array([[1.0, -2.0, 3.0, 0.5]])
    out, tape = ad.forward(net, params, x, record=True)
    _, grads = ad.backward(tape, np.ones_like(out))
    np.testing.assert_array_equal(grads["d.weight"][:, 0], x[0])
    np.testing.assert_array_equal(grads["d.bias"], [1.0])


def test_backward_requires_tape():
    net = small_cnn()
    params = ad.init_params(net, 0, np.float64)
    out, tape = ad.forward(net, params, np.zeros((1, 2, 8, 8)))
    with pytest.raises(ValueError):
        ad.backward(tape, np.zeros_like(out))


def _quadratic(target):
    def loss(out):
        d = out - target
        return 0.5 * float((d * d).sum()), d
    return loss


LAYER_CASES = {
    "conv2d": lambda c: [LayerSpec("conv2d", "l", in_channels=c, out_channels=3)],
    "relu": lambda c: [LayerSpec("conv2d", "l", in_channels=c, out_channels=3), LayerSpec("relu", "r")],
    "maxpool2d": lambda c: [LayerSpec("conv2d", "l", in_channels=c, out_channels=3),
                            LayerSpec("maxpool2d", "p", kernel=2)],
    "avgpool-global": lambda c: [LayerSpec("conv2d", "l", in_channels=c, out_channels=3),
                                 LayerSpec("avgpool-global", "g")],
    "dense": lambda c: [LayerSpec("avgpool-global", "g"), LayerSpec("dense", "l", in_channels=c, units=4)],
    # a relu in front keeps the bias visible; directly before batch norm its gradient is exactly zero
    "batchnorm": lambda c: [LayerSpec("conv2d", "l", in_channels=c, out_channels=3), LayerSpec("relu", "r"),
                            LayerSpec("batchnorm", "bn", in_channels=3)],
    "batchnorm-dense": lambda c: [LayerSpec("avgpool-global", "g"), LayerSpec("batchnorm", "bn", in_channels=c),
                                  LayerSpec("dense", "l", in_channels=c, units=4)],
    "ksparse": lambda c: [LayerSpec("avgpool-global", "g"), LayerSpec("dense", "l", in_channels=c, units=10),
                          LayerSpec("ksparse", "k", k_percent=30)],
}


@pytest.mark.parametrize("kind", sorted(LAYER_CASES))
@pytest.mark.parametrize("seed", range(20))
def test_layer_gradients_match_finite_differences(kind, seed):
    rng = np.random.default_rng(seed)
    c = int(rng.integers(1, 4))
    net = LAYER_CASES[kind](c)
    params = ad.init_params(net, seed, np.float64)
    for k in params:
        if k.endswith("bias") or k == "bn.weight":
            params[k] = rng.normal(scale=0.3, size=params[k].shape) + (k == "bn.weight")
    x = rng.normal(size=(3, c, 4, 6))
    out, _ = ad.forward(net, params, x)
    report = ad.grad_check(net, params, _quadratic(rng.normal(size=out.shape)), x)
    assert report.passed, report.errors


@pytest.mark.parametrize("seed", range(5))
def test_input_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    net = small_cnn()
    params = ad.init_params(net, seed, np.float64)
    x = rng.normal(size=(2, 2, 8, 8))
    out, tape = ad.forward(net, params, x, record=True)
    target = rng.normal(size=out.shape)
    loss = _quadratic(target)
    dx, _ = ad.backward(tape, loss(out)[1])
    idx = [tuple(rng.integers(s) for s in x.shape) for _ in range(30)]
    num = ad.numeric_grad(lambda: loss(ad.forward(net, params, x)[0])[0], x, idx)
    assert ad.relative_error(np.array([dx[i] for i in idx]), num) < 1e-4


def test_grad_check_linear_quadratic_exact():
    net = [LayerSpec("dense", "d", in_channels=3, units=2)]
    params = ad.init_params(net, 0, np.float64)
    x = np.random.default_rng(0).normal(size=(4, 3))
    report = ad.grad_check(net, params, _quadratic(np.ones((4, 2))), x)
    assert report.max_error < 1e-10


def test_grad_check_flags_corrupted_backward():
    net = small_cnn()
    params = ad.init_params(net, 0, np.float64)
    x = np.random.default_rng(0).normal(size=(2, 2, 8, 8))

    def corrupted(tape, g):
        dx, grads = ad.backward(tape, g)
        grads["c2.weight"] = -grads["c2.weight"]
        return dx, grads

    out, _ = ad.forward(net, params, x)
    report = ad.grad_check(net, params, _quadratic(np.zeros(out.shape)), x, backward_fn=corrupted)
    assert not report.passed
    assert report.failures == ["c2.weight"]


def test_grad_check_requires_float64():
    net = [LayerSpec("dense", "d", in_channels=3, units=2)]
    params = ad.init_params(net, 0, np.float32)
    with pytest.raises(TypeError):
        ad.grad_check(net, params, _quadratic(np.zeros((1, 2))), np.zeros((1, 3), np.float32))


# -- k-sparse ---------------------------------------------------------------

def sort_oracle(z, k):
    m = math.ceil(round(k * len(z) / 100, 9))
    keep = sorted(range(len(z)), key=lambda i: (-z[i], i))[:m]
    return np.array([z[i] if i in keep else 0.0 for i in range(len(z))])


def test_ksparse_worked_example():
    z = np.array([3, 1, 2, 5, 0, -1, 4, 2, 1, 0], dtype=float)
    np.testing.assert_array_equal(ad.ksparse_activate(z, 20), [0, 0, 0, 5, 0, 0, 4, 0, 0, 0])
    np.testing.assert_array_equal(ad.ksparse_activate(z, 20), sort_oracle(z, 20))


def test_ksparse_full_support_is_identity():
    z = np.random.default_rng(0).normal(size=(3, 7))
    np.testing.assert_array_equal(ad.ksparse_activate(z, 100), z)


def test_ksparse_ties_lowest_index():
    mask = ad.ksparse_support(np.full(10, 0.7), 20)
    assert mask.tolist() == [True, True] + [False] * 8


@pytest.mark.parametrize("k", [0, -5, 100.5])
def test_ksparse_rejects_bad_k(k):
    with pytest.raises(ValueError):
        ad.ksparse_activate(np.ones(4), k)


def test_support_size_is_exact_in_decimal():
    assert ad.support_size(30, 10) == 3
    assert ad.support_size(20, 64) == 13
    assert ad.support_size(20, 10) == 2


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=40),
       st.floats(1, 100))
def test_ksparse_masked_copy_property(values, k):
    z = np.array(values)
    out = ad.ksparse_activate(z, k)
    np.testing.assert_array_equal(out, sort_oracle(z, k))
    mask = ad.ksparse_support(z, k)
    assert mask.sum() == ad.support_size(k, len(z))
    assert np.array_equal(out[mask], z[mask])


# -- optimiser and EMA ------------------------------------------------------

def test_sgd_zero_grad_fixed_point():
    p = {"w": np.array([1.0, -2.0])}
    state = ad.OptimizerState.for_params(p, 0.1, 0.9)
    ad.sgd_momentum_step(p, {"w": np.zeros(2)}, state)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_sgd_first_step_and_velocity():
    g = np.array([0.5, -1.0])
    p = {"w": np.array([1.0, 1.0])}
    state = ad.OptimizerState.for_params(p, 1e-4, 0.9)
    ad.sgd_momentum_step(p, {"w": g}, state)
    np.testing.assert_allclose(p["w"], 1.0 - 1e-4 * g, rtol=0, atol=1e-15)
    ad.sgd_momentum_step(p, {"w": g}, state)
    np.testing.assert_allclose(state.velocity["w"], 1.9 * g, rtol=1e-15)


def test_sgd_rejects_non_finite():
    p = {"w": np.zeros(2)}
    state = ad.OptimizerState.for_params(p, 0.1, 0.9)
    with pytest.raises(ad.NonFiniteError):
        ad.sgd_momentum_step(p, {"w": np.array([np.inf, 0])}, state)


def test_ema_hand_values():
    theta_m = {"w": np.zeros(3)}
    theta = {"w": np.ones(3)}
    out = ad.ema_update(theta_m, theta, 0.999)
    assert out["w"].tolist() == [0.001] * 3
    assert ad.ema_update(theta_m, theta, 0.0)["w"].tolist() == [1.0] * 3
    assert ad.ema_update(theta, theta, 0.999)["w"].tolist() == [1.0] * 3


def test_ema_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        ad.ema_update({"w": np.zeros(2)}, {"w": np.zeros(3)}, 0.5)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1))
def test_ema_contraction(seed, alpha):
    rng = np.random.default_rng(seed)
    theta_m = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=5)}
    theta = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=5)}
    out = ad.ema_update(theta_m, theta, alpha)
    for k in theta:
        lhs = np.abs(out[k] - theta[k])
        rhs = alpha * np.abs(theta_m[k] - theta[k])
        assert np.all(lhs <= rhs + 4 * np.finfo(float).eps * (np.abs(theta[k]) + np.abs(theta_m[k])))
    assert ad.ema_update(theta_m, theta_m, alpha)["a"].tobytes() == theta_m["a"].tobytes()


# -- network layouts ---------------------------------------------------------

def test_extractor_and_head_layout():
    net = build_extractor()
    convs = [l for l in net if l.kind == "conv2d"]
    assert [l.name for l in convs] == ["stage1", "stage2", "stage3", "stage4", "stage5"]
    assert [l.out_channels for l in convs] == [16, 32, 64, 128, 128]
    head = build_head()
    assert [l.kind for l in head] == ["dense", "batchnorm", "ksparse", "dense"]
    assert head[0].units == 64 and head[3].units == 32 and head[2].k_percent == 20
    # every conv is followed by its batch norm
    for i, layer in enumerate(net):
        if layer.kind == "conv2d":
            assert net[i + 1].kind == "batchnorm" and net[i + 1].in_channels == layer.out_channels


# -- batch norm --------------------------------------------------------------

BN_NET = [LayerSpec("conv2d", "c", in_channels=2, out_channels=3), LayerSpec("batchnorm", "bn", in_channels=3),
          LayerSpec("relu", "r"), LayerSpec("avgpool-global", "g"), LayerSpec("dense", "d", in_channels=3, units=2)]


def _bn_params(seed):
    rng = np.random.default_rng(seed)
    params = ad.init_params(BN_NET, seed, np.float64)
    params["bn.running_mean"] = rng.normal(size=3)
    params["bn.running_var"] = rng.uniform(0.5, 2, size=3)
    params["bn.weight"] = rng.uniform(0.5, 1.5, size=3)
    params["bn.bias"] = rng.normal(scale=0.3, size=3)
    return params


def test_batchnorm_train_mode_normalises_each_channel():
    rng = np.random.default_rng(0)
    x = rng.normal(loc=3, scale=2, size=(4, 3, 5, 5))
    net = [LayerSpec("batchnorm", "bn", in_channels=3)]
    params = ad.init_params(net, 0, np.float64)
    y, tape = ad.forward(net, params, x, train=True)
    assert np.allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    assert np.allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-4)
    assert set(tape.stats) == {"bn"}


def test_batchnorm_eval_mode_uses_running_buffers():
    params = _bn_params(1)
    x = np.random.default_rng(1).normal(size=(2, 3, 4, 4))
    net = [LayerSpec("batchnorm", "bn", in_channels=3)]
    y, _ = ad.forward(net, params, x)
    shape = (1, 3, 1, 1)
    want = ((x - params["bn.running_mean"].reshape(shape)) / np.sqrt(params["bn.running_var"].reshape(shape) + ad.BN_EPS)
            * params["bn.weight"].reshape(shape) + params["bn.bias"].reshape(shape))
    assert np.allclose(y, want, atol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_batchnorm_eval_mode_gradients(seed):
    rng = np.random.default_rng(seed)
    params = _bn_params(seed)
    x = rng.normal(size=(3, 2, 6, 6))
    loss = _quadratic(rng.normal(size=(3, 2)))
    out, tape = ad.forward(BN_NET, params, x, record=True, train=False)
    dx, grads = ad.backward(tape, loss(out)[1])

    def f():
        return loss(ad.forward(BN_NET, params, x, train=False)[0])[0]

    for k in ad.trainable_keys(BN_NET):
        idx = [tuple(rng.integers(s) for s in params[k].shape) for _ in range(6)]
        num = ad.numeric_grad(f, params[k], idx)
        assert ad.relative_error(np.array([grads[k][i] for i in idx]), num) < 1e-4, k
    idx = [tuple(rng.integers(s) for s in x.shape) for _ in range(10)]
    assert ad.relative_error(np.array([dx[i] for i in idx]), ad.numeric_grad(f, x, idx)) < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_batchnorm_train_mode_input_gradient(seed):
    rng = np.random.default_rng(seed)
    params = _bn_params(seed)
    x = rng.normal(size=(3, 2, 6, 6))
    loss = _quadratic(rng.normal(size=(3, 2)))
    out, tape = ad.forward(BN_NET, params, x, record=True)
    dx, _ = ad.backward(tape, loss(out)[1])
    idx = [tuple(rng.integers(s) for s in x.shape) for _ in range(15)]
    num = ad.numeric_grad(lambda: loss(ad.forward(BN_NET, params, x, train=True)[0])[0], x, idx)
    assert ad.relative_error(np.array([dx[i] for i in idx]), num) < 1e-4


def test_buffers_are_not_trainable_and_get_no_grads():
    params = _bn_params(0)
    assert "bn.running_mean" not in ad.trainable_keys(BN_NET)
    out, tape = ad.forward(BN_NET, params, np.ones((2, 2, 4, 4)), record=True)
    _, grads = ad.backward(tape, np.ones_like(out))
    assert not any(k.endswith(ad.BUFFERS) for k in grads)
    before = params["bn.running_var"].copy()
    state = ad.OptimizerState.for_params(params, lr=0.1, momentum=0.9)
    ad.sgd_momentum_step(params, grads, state)
    assert np.array_equal(params["bn.running_var"], before)


def test_running_stats_update():
    params = _bn_params(2)
    x = np.random.default_rng(2).normal(size=(4, 2, 6, 6))
    old_mean = params["bn.running_mean"].copy()
    _, tape = ad.forward(BN_NET, params, x, train=True)
    mean, var = tape.stats["bn"]
    ad.update_running_stats(params, tape, momentum=0.25)
    assert np.allclose(params["bn.running_mean"], 0.75 * old_mean + 0.25 * mean, atol=1e-12)
    # momentum 1 replaces the buffers with the batch statistics
    ad.update_running_stats(params, tape, momentum=1.0)
    assert np.allclose(params["bn.running_var"], var, atol=1e-12)


def test_bias_before_train_mode_batchnorm_has_zero_gradient():
    params = _bn_params(3)
    out, tape = ad.forward(BN_NET, params, np.random.default_rng(3).normal(size=(3, 2, 5, 5)), record=True)
    _, grads = ad.backward(tape, np.random.default_rng(4).normal(size=out.shape))
    assert np.allclose(grads["c.bias"], 0, atol=1e-12)
    assert np.abs(grads["c.weight"]).max() > 1e-6


def test_smooth_differences_step_around_a_kink():
    net = [LayerSpec("dense", "d", in_channels=1, units=1), LayerSpec("relu", "r")]
    params = {"d.weight": np.array([[1.0]]), "d.bias": np.array([0.0])}
    x = np.array([[1e-6]])  # the relu switches 1e-6 away from here

    def f():
        out, tape = ad.forward(net, params, x, record=True)
        return float(out.sum()), ad.activation_pattern(tape)

    # plain central differences straddle the kink and halve the slope
    plain = ad.numeric_grad(lambda: f()[0], params["d.bias"], [(0,)], step=1e-5)
    assert plain[0] == pytest.approx(0.55, abs=1e-6)
    smooth = ad.numeric_grad_smooth(f, params["d.bias"], [(0,)], step=1e-5)
    assert smooth[0] == pytest.approx(1.0, abs=1e-6)
    x[0, 0] = 0.0  # exactly on the kink: no derivative
    assert np.isnan(ad.numeric_grad_smooth(f, params["d.bias"], [(0,)]))[0]
