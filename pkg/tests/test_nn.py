import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dtc import nn
from dtc.nn import Parameter


def direct_conv(x, kernels, bias):
    """Loop-based 'same' convolution used as an oracle."""
    b, length, cin = x.shape
    k, _, f = kernels.shape
    left = k // 2
    y = np.tile(bias, (b, length, 1)).astype(float)
    for bi in range(b):
        for t in range(length):
            for tau in range(k):
                s = t + tau - left
                if 0 <= s < length:
                    y[bi, t] += x[bi, s] @ kernels[tau]
    return y


def row(values):
    return np.asarray(values, dtype=float)[None, :, None]


# --- conv1d ---------------------------------------------------------------

def test_conv_identity_kernel():
    y, _ = nn.conv1d_forward(row([1, 2, 3]), np.array([0.0, 1, 0]).reshape(3, 1, 1), np.zeros(1))
    np.testing.assert_array_equal(y.ravel(), [1, 2, 3])


def test_conv_matches_direct_sum_even_kernel():
    x = row([1, 1, 1, 1])
    k = np.ones((2, 1, 1))
    y, _ = nn.conv1d_forward(x, k, np.zeros(1))
    np.testing.assert_allclose(y, direct_conv(x, k, np.zeros(1)))
    # hand sum: left pad 1, so y[t] = x[t-1] + x[t]
    np.testing.assert_array_equal(y.ravel(), [1, 2, 2, 2])


@pytest.mark.parametrize("seed", range(5))
def test_conv_matches_direct_sum_random(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 9, 3))
    k = rng.standard_normal((int(rng.integers(1, 6)), 3, 4))
    b = rng.standard_normal(4)
    y, _ = nn.conv1d_forward(x, k, b)
    np.testing.assert_allclose(y, direct_conv(x, k, b), atol=1e-12)


def test_conv_rejects_shape_mismatch():
    with pytest.raises(ValueError, match="channels"):
        nn.conv1d_forward(np.zeros((1, 5, 2)), np.zeros((3, 1, 1)), np.zeros(1))
    with pytest.raises(ValueError, match="exceeds"):
        nn.conv1d_forward(np.zeros((1, 2, 1)), np.zeros((3, 1, 1)), np.zeros(1))


def _fd_layer(forward, backward, x, weights, seed, tol):
    """Checks input and weight gradients of sum(y * r) for a random projection r."""
    rng = np.random.default_rng(seed)
    params = [Parameter(x)] + [Parameter(w) for w in weights]
    y0, _ = forward(*[p.value for p in params])
    r = rng.standard_normal(y0.shape)

    def fn():
        y, ctx = forward(*[p.value for p in params])
        grads = backward(ctx, r)
        for p, g in zip(params, grads):
            p.grad += g
        return float(np.sum(y * r))

    assert nn.finite_difference_check(fn, params) < tol


@pytest.mark.parametrize("seed", range(20))
def test_conv_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 7, 2))
    _fd_layer(nn.conv1d_forward, nn.conv1d_backward, x,
              [rng.standard_normal((4, 2, 3)), rng.standard_normal(3)], seed, 1e-6)


def test_conv_gradient_of_sum():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 8, 1))
    k = Parameter(rng.standard_normal((3, 1, 2)))

    def fn():
        y, ctx = nn.conv1d_forward(x, k.value, np.zeros(2))
        k.grad += nn.conv1d_backward(ctx, np.ones_like(y))[1]
        return float(y.sum())

    assert nn.finite_difference_check(fn, [k]) < 1e-6


# --- deconv1d ---------------------------------------------------------------

def test_deconv_identity_roundtrip():
    x = row([4, -1, 2.5, 0])
    y, _ = nn.deconv1d_forward(x, np.array([0.0, 1, 0]).reshape(3, 1, 1), np.zeros(1))
    np.testing.assert_array_equal(y, x)


def test_deconv_zero_kernel_gives_bias():
    y, _ = nn.deconv1d_forward(np.ones((2, 5, 1)), np.zeros((3, 1, 1)), np.array([0.7]))
    np.testing.assert_array_equal(y, np.full((2, 5, 1), 0.7))


def test_deconv_is_adjoint_of_conv():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 10, 2))
    u = rng.standard_normal((1, 10, 3))
    k = rng.standard_normal((4, 2, 3))
    conv, _ = nn.conv1d_forward(x, k, np.zeros(3))
    deconv, _ = nn.deconv1d_forward(u, k, np.zeros(2))
    assert np.sum(conv * u) == pytest.approx(np.sum(x * deconv), rel=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_deconv_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 8, 3))
    _fd_layer(nn.deconv1d_forward, nn.deconv1d_backward, x,
              [rng.standard_normal((5, 1, 3)), rng.standard_normal(1)], seed, 1e-6)


# --- leaky relu ---------------------------------------------------------------

def test_leaky_relu_values():
    y, _ = nn.leaky_relu_forward(np.array([5.0, -1.0, 0.0]))
    np.testing.assert_array_equal(y, [5.0, -0.01, 0.0])


@pytest.mark.parametrize("seed", range(20))
def test_leaky_relu_gradient(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 6, 3))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    _fd_layer(lambda v: nn.leaky_relu_forward(v, 0.01), lambda c, d: (nn.leaky_relu_backward(c, d),), x, [], seed, 1e-4)


# --- pooling ---------------------------------------------------------------

def test_maxpool_examples():
    y, ctx = nn.maxpool1d_forward(row([1, 3, 2, 5]), 2)
    np.testing.assert_array_equal(y.ravel(), [3, 5])
    np.testing.assert_array_equal(nn.maxpool1d_backward(ctx, row([1, 1])).ravel(), [0, 1, 0, 1])
    y, _ = nn.maxpool1d_forward(row([7]), 2)
    np.testing.assert_array_equal(y.ravel(), [7])


def test_maxpool_partial_window_and_ties():
    y, ctx = nn.maxpool1d_forward(row([2, 2, 1, 9, 4]), 2)
    np.testing.assert_array_equal(y.ravel(), [2, 9, 4])
    np.testing.assert_array_equal(nn.maxpool1d_backward(ctx, row([1, 1, 1])).ravel(), [1, 0, 0, 1, 1])


def test_maxpool_rejects_nonpositive_pool():
    with pytest.raises(ValueError):
        nn.maxpool1d_forward(row([1, 2]), 0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 30), st.integers(1, 3)),
              elements=st.floats(-1e6, 1e6)),
       st.integers(1, 7))
def test_maxpool_length_and_gradient_conservation(x, pool):
    y, ctx = nn.maxpool1d_forward(x, pool)
    assert y.shape[1] == -(-x.shape[1] // pool)
    dy = np.random.default_rng(0).standard_normal(y.shape)
    dx = nn.maxpool1d_backward(ctx, dy)
    assert dx.shape == x.shape
    np.testing.assert_allclose(dx.sum(), dy.sum(), rtol=1e-9, atol=1e-9)


@pytest.mark.parametrize("seed", range(20))
def test_maxpool_gradient(seed):
    rng = np.random.default_rng(seed)
    x = rng.permutation(48).reshape(2, 8, 3) * 0.1  # distinct values, no ties under perturbation
    _fd_layer(lambda v: nn.maxpool1d_forward(v, 3), lambda c, d: (nn.maxpool1d_backward(c, d),), x, [], seed, 1e-4)


# --- upsampling ---------------------------------------------------------------

def test_upsample_examples():
    y, f = nn.upsample1d_forward(row([3, 5]), 2)
    np.testing.assert_array_equal(y.ravel(), [3, 3, 5, 5])
    np.testing.assert_array_equal(nn.upsample1d_backward(f, row([1, 1, 1, 1])).ravel(), [2, 2])
    x = row([1, 2, 3])
    np.testing.assert_array_equal(nn.upsample1d_forward(x, 1)[0], x)


@pytest.mark.parametrize("seed", range(20))
def test_upsample_gradient(seed):
    rng = np.random.default_rng(seed)
    _fd_layer(lambda v: nn.upsample1d_forward(v, 3), lambda f, d: (nn.upsample1d_backward(f, d),),
              rng.standard_normal((2, 4, 2)), [], seed, 1e-4)


# --- LSTM ---------------------------------------------------------------

def _bilstm_params(rng, f, h, scale=0.5):
    return nn.init_bilstm(rng, f, h, scale)


def test_bilstm_zero_weights_give_zero_output():
    params = {k: np.zeros_like(v) for k, v in _bilstm_params(np.random.default_rng(0), 2, 3).items()}
    y, _ = nn.bilstm_forward(np.random.default_rng(1).standard_normal((2, 6, 2)), params)
    np.testing.assert_array_equal(y, 0.0)


def test_bilstm_constant_input_time_reversal_symmetry():
    rng = np.random.default_rng(4)
    p = _bilstm_params(rng, 2, 3)
    for name in ("wx", "wh", "b"):
        p[f"bwd.{name}"] = p[f"fwd.{name}"]
    x = np.tile(np.array([0.3, -0.7]), (1, 9, 1))
    y, _ = nn.bilstm_forward(x, p)
    np.testing.assert_allclose(y, y[:, ::-1], atol=1e-15)


def test_lstm_shape_mismatch_rejected():
    with pytest.raises(ValueError, match="LSTM parameter shapes"):
        nn.lstm_forward(np.zeros((1, 3, 2)), np.zeros((3, 8)), np.zeros((2, 8)), np.zeros(8))


@pytest.mark.parametrize("seed", range(20))
def test_bilstm_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 7, 2))
    raw = _bilstm_params(rng, 2, 3)
    params = {k: Parameter(v) for k, v in raw.items()}
    xp = Parameter(x)
    r = rng.standard_normal((1, 7, 3))

    def fn():
        vals = {k: p.value for k, p in params.items()}
        y, ctx = nn.bilstm_forward(xp.value, vals)
        dx, grads = nn.bilstm_backward(ctx, r, vals)
        xp.grad += dx
        for k, g in grads.items():
            params[k].grad += g
        return float(np.sum(y * r))

    assert nn.finite_difference_check(fn, [xp, *params.values()]) < 1e-5


# --- losses and optimisers ---------------------------------------------------

def test_mse_examples():
    assert nn.mse_loss(np.ones((2, 3)), np.ones((2, 3)))[0] == 0.0
    assert nn.mse_loss(np.array([2.0]), np.array([0.0]))[0] == 2.0
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    loss, grad = nn.mse_loss(x, np.zeros_like(x))
    assert loss == pytest.approx(0.5 * 30 / 2)
    np.testing.assert_array_equal(grad, -x / 2)
    with pytest.raises(ValueError):
        nn.mse_loss(np.ones(3), np.ones(4))


def test_mse_gradient_finite_difference():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 5))
    rec = Parameter(rng.standard_normal((3, 5)))

    def fn():
        loss, g = nn.mse_loss(x, rec.value)
        rec.grad += g
        return loss

    assert nn.finite_difference_check(fn, [rec]) < 1e-8


def test_sgd_examples():
    p = Parameter(np.array([1.0]))
    nn.sgd_step([p], 0.1)
    assert p.value[0] == 1.0
    p.grad[:] = 0.5
    nn.sgd_step([p], 0.1)
    assert p.value[0] == pytest.approx(0.95, abs=1e-15)


@pytest.mark.parametrize("g", [3.0, -0.002, 250.0])
def test_adam_first_step_moves_by_learning_rate(g):
    p = Parameter(np.array([2.0]))
    p.grad[:] = g
    state = nn.adam_step([p], nn.Adam(learning_rate=0.01))
    assert state.t == 1
    assert p.value[0] - 2.0 == pytest.approx(-0.01 * np.sign(g), rel=1e-5)


def test_parameter_zero_grad():
    p = Parameter(np.ones((2, 2)))
    p.grad += 3.0
    p.zero_grad()
    assert p.grad.shape == p.value.shape
    assert not p.grad.any()


# --- finite difference harness ---------------------------------------------------

def test_finite_difference_exact_for_linear():
    w = Parameter(np.array([0.3, -1.2, 2.0]))
    x = np.array([1.5, 2.0, -0.5])

    def fn():
        w.grad += x
        return float(w.value @ x)

    assert nn.finite_difference_check(fn, [w]) < 1e-9
    np.testing.assert_array_equal(w.grad, x)


def test_finite_difference_detects_wrong_gradient():
    w = Parameter(np.array([1.0, 2.0]))

    def fn():
        w.grad += 3 * w.value  # true gradient is 2w
        return float(np.sum(w.value**2))

    assert nn.finite_difference_check(fn, [w]) > 0.1


def test_relative_error_floor():
    assert nn.relative_error(0.0, 0.0) == 0.0
    assert nn.relative_error(1e-12, 0.0) == pytest.approx(1e-4)


@pytest.mark.parametrize("layer", ["conv", "deconv", "pool", "up", "lstm"])
def test_outputs_finite_for_large_inputs(layer):
    rng = np.random.default_rng(0)
    x = rng.uniform(-1e6, 1e6, (2, 12, 2))
    if layer == "conv":
        y, ctx = nn.conv1d_forward(x, rng.standard_normal((3, 2, 2)), np.zeros(2))
        outs = [y, *nn.conv1d_backward(ctx, np.ones_like(y))]
    elif layer == "deconv":
        y, ctx = nn.deconv1d_forward(x, rng.standard_normal((3, 1, 2)), np.zeros(1))
        outs = [y, *nn.deconv1d_backward(ctx, np.ones_like(y))]
    elif layer == "pool":
        y, ctx = nn.maxpool1d_forward(x, 4)
        outs = [y, nn.maxpool1d_backward(ctx, np.ones_like(y))]
    elif layer == "up":
        y, f = nn.upsample1d_forward(x, 3)
        outs = [y, nn.upsample1d_backward(f, np.ones_like(y))]
    else:
        p = nn.init_bilstm(rng, 2, 3, 0.01)
        y, ctx = nn.bilstm_forward(x, p)
        dx, grads = nn.bilstm_backward(ctx, np.ones_like(y), p)
        outs = [y, dx, *grads.values()]
    assert all(np.isfinite(o).all() for o in outs)


def test_forward_backward_bitwise_reproducible():
    def run():
        rng = np.random.default_rng(11)
        x = rng.standard_normal((2, 10, 1))
        k = rng.standard_normal((3, 1, 4))
        h, c1 = nn.conv1d_forward(x, k, np.zeros(4))
        p = nn.init_bilstm(rng, 4, 2, 0.3)
        y, c2 = nn.bilstm_forward(h, p)
        dh, g = nn.bilstm_backward(c2, np.ones_like(y), p)
        return y, nn.conv1d_backward(c1, dh)[1], g["fwd.wh"]

    for a, b in zip(run(), run()):
        assert np.array_equal(a, b)
