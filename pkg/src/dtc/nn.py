"""Minimal differentiable layers for the temporal autoencoder.

Every layer is a pair of functions: ``*_forward`` returns the output and a
context object, ``*_backward`` consumes that context and the upstream gradient.
Inputs are batched float64 arrays shaped ``(batch, time, channels)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

DTYPE = np.float64


class Parameter:
    """A trainable array together with its accumulated gradient."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.array(value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter(shape={self.value.shape})"


def _check_3d(x, name="x"):
    if x.ndim != 3:
        raise ValueError(f"{name} must be (batch, time, channels), got shape {x.shape}")


def _same_pad(k):
    left = k // 2
    return left, k - 1 - left


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

@dataclass
class ConvContext:
    windows: np.ndarray
    kernels: np.ndarray
    length: int


def _windows(x, k):
    left, right = _same_pad(k)
    xp = np.pad(x, ((0, 0), (left, right), (0, 0)))
    # (B, L, C, K): windows[b, t, c, tau] = x[b, t + tau - left, c]
    return np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)


def conv1d_forward(x, kernels, bias):
    """Zero-padded 'same' 1D convolution.

    ``y[b, t, f] = bias[f] + sum_{tau, c} x[b, t + tau - K//2, c] * kernels[tau, c, f]``
    """
    _check_3d(x)
    if kernels.ndim != 3:
        raise ValueError(f"kernels must be (K, Cin, F), got shape {kernels.shape}")
    k, cin, f = kernels.shape
    if x.shape[2] != cin:
        raise ValueError(f"input has {x.shape[2]} channels but kernels expect {cin}")
    if bias.shape != (f,):
        raise ValueError(f"bias must have shape ({f},), got {bias.shape}")
    if k > x.shape[1]:
        raise ValueError(f"kernel size {k} exceeds sequence length {x.shape[1]}")
    win = _windows(x, k)
    y = np.einsum("btck,kcf->btf", win, kernels, optimize=True) + bias
    return y, ConvContext(win, kernels, x.shape[1])


def _conv_transpose_input(dy, kernels, length):
    """Adjoint of the 'same' convolution with respect to its input."""
    k = kernels.shape[0]
    left, _ = _same_pad(k)
    b, _, _ = dy.shape
    dxp = np.zeros((b, length + k - 1, kernels.shape[1]), dtype=DTYPE)
    for tau in range(k):
        dxp[:, tau:tau + length, :] += dy @ kernels[tau].T
    return dxp[:, left:left + length, :]


def conv1d_backward(ctx, dy):
    """Returns ``(dx, dkernels, dbias)``."""
    dk = np.einsum("btck,btf->kcf", ctx.windows, dy, optimize=True)
    db = dy.sum(axis=(0, 1))
    dx = _conv_transpose_input(dy, ctx.kernels, ctx.length)
    return dx, dk, db


@dataclass
class DeconvContext:
    x: np.ndarray
    kernels: np.ndarray


def deconv1d_forward(x, kernels, bias):
    """Transposed 'same' convolution mapping F feature channels back to C channels.

    ``kernels`` has shape ``(K, C, F)`` and the output keeps the input length, so
    this is exactly the input-adjoint of :func:`conv1d_forward` plus a bias.
    """
    _check_3d(x)
    if kernels.ndim != 3:
        raise ValueError(f"kernels must be (K, Cout, F), got shape {kernels.shape}")
    k, cout, f = kernels.shape
    if x.shape[2] != f:
        raise ValueError(f"input has {x.shape[2]} channels but kernels expect {f}")
    if bias.shape != (cout,):
        raise ValueError(f"bias must have shape ({cout},), got {bias.shape}")
    if k > x.shape[1]:
        raise ValueError(f"kernel size {k} exceeds sequence length {x.shape[1]}")
    y = _conv_transpose_input(x, kernels, x.shape[1]) + bias
    return y, DeconvContext(x, kernels)


def deconv1d_backward(ctx, dy):
    """Returns ``(dx, dkernels, dbias)``."""
    k = ctx.kernels.shape[0]
    win = _windows(dy, k)
    dx = np.einsum("btck,kcf->btf", win, ctx.kernels, optimize=True)
    dk = np.einsum("btck,btf->kcf", win, ctx.x, optimize=True)
    db = dy.sum(axis=(0, 1))
    return dx, dk, db


# --------------------------------------------------------------------------
# pointwise / resampling
# --------------------------------------------------------------------------

def leaky_relu_forward(x, slope=0.01):
    mask = x > 0
    return np.where(mask, x, slope * x), (mask, slope)


def leaky_relu_backward(ctx, dy):
    mask, slope = ctx
    return np.where(mask, dy, slope * dy)


def pooled_length(length, pool):
    return -(-length // pool)


def maxpool1d_forward(x, pool):
    """Non-overlapping max pooling along time; the last window may be partial."""
    _check_3d(x)
    if pool <= 0:
        raise ValueError(f"pool size must be positive, got {pool}")
    b, length, c = x.shape
    t = pooled_length(length, pool)
    padded = np.full((b, t * pool, c), -np.inf, dtype=DTYPE)
    padded[:, :length] = x
    blocks = padded.reshape(b, t, pool, c)
    idx = blocks.argmax(axis=2)  # first maximum wins ties
    y = np.take_along_axis(blocks, idx[:, :, None, :], axis=2)[:, :, 0, :]
    return y, (idx, length, pool)


def maxpool1d_backward(ctx, dy):
    idx, length, pool = ctx
    b, t, c = dy.shape
    dblocks = np.zeros((b, t, pool, c), dtype=DTYPE)
    np.put_along_axis(dblocks, idx[:, :, None, :], dy[:, :, None, :], axis=2)
    return dblocks.reshape(b, t * pool, c)[:, :length]


def upsample1d_forward(x, factor):
    _check_3d(x)
    if factor < 1:
        raise ValueError(f"upsampling factor must be >= 1, got {factor}")
    return np.repeat(x, factor, axis=1), factor


def upsample1d_backward(factor, dy):
    b, tp, c = dy.shape
    return dy.reshape(b, tp // factor, factor, c).sum(axis=2)


# --------------------------------------------------------------------------
# LSTM
# --------------------------------------------------------------------------

def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class LstmContext:
    x: np.ndarray
    h: np.ndarray  # (B, T+1, H); h[:, 0] is the initial state
    c: np.ndarray  # (B, T+1, H)
    gates: np.ndarray  # (B, T, 4, H) activated i, f, o, g
    tanh_c: np.ndarray  # (B, T, H)


def lstm_forward(x, wx, wh, b):
    """Single-direction LSTM without peepholes, zero initial state.

    Gate order along the last axis of ``wx``/``wh``/``b`` is input, forget,
    output, candidate.
    """
    _check_3d(x)
    bsz, steps, feat = x.shape
    hidden = wh.shape[0]
    if wx.shape != (feat, 4 * hidden) or wh.shape != (hidden, 4 * hidden) or b.shape != (4 * hidden,):
        raise ValueError(
            f"LSTM parameter shapes {wx.shape}, {wh.shape}, {b.shape} do not match "
            f"{feat} inputs and {hidden} units"
        )
    pre_x = (x @ wx + b).reshape(bsz, steps, 4, hidden)
    h = np.zeros((bsz, steps + 1, hidden), dtype=DTYPE)
    c = np.zeros((bsz, steps + 1, hidden), dtype=DTYPE)
    gates = np.empty((bsz, steps, 4, hidden), dtype=DTYPE)
    tanh_c = np.empty((bsz, steps, hidden), dtype=DTYPE)
    for t in range(steps):
        a = pre_x[:, t] + (h[:, t] @ wh).reshape(bsz, 4, hidden)
        g = gates[:, t]
        g[:, :3] = sigmoid(a[:, :3])
        g[:, 3] = np.tanh(a[:, 3])
        c[:, t + 1] = g[:, 1] * c[:, t] + g[:, 0] * g[:, 3]
        tanh_c[:, t] = np.tanh(c[:, t + 1])
        h[:, t + 1] = g[:, 2] * tanh_c[:, t]
    return h[:, 1:], LstmContext(x, h, c, gates, tanh_c)


def lstm_backward(ctx, dh_out, wx, wh):
    """Backpropagation through time over the full sequence.

    Returns ``(dx, dwx, dwh, db)``.
    """
    bsz, steps, hidden = dh_out.shape
    da_all = np.empty((bsz, steps, 4, hidden), dtype=DTYPE)
    dh_next = np.zeros((bsz, hidden), dtype=DTYPE)
    dc_next = np.zeros((bsz, hidden), dtype=DTYPE)
    for t in range(steps - 1, -1, -1):
        i, f, o, g = (ctx.gates[:, t, j] for j in range(4))
        tc = ctx.tanh_c[:, t]
        dh = dh_out[:, t] + dh_next
        dc = dh * o * (1.0 - tc * tc) + dc_next
        da = da_all[:, t]
        da[:, 0] = dc * g * i * (1.0 - i)
        da[:, 1] = dc * ctx.c[:, t] * f * (1.0 - f)
        da[:, 2] = dh * tc * o * (1.0 - o)
        da[:, 3] = dc * i * (1.0 - g * g)
        dc_next = dc * f
        dh_next = da.reshape(bsz, 4 * hidden) @ wh.T
    da_flat = da_all.reshape(bsz, steps, 4 * hidden)
    dwx = np.einsum("btf,btg->fg", ctx.x, da_flat, optimize=True)
    dwh = np.einsum("bth,btg->hg", ctx.h[:, :-1], da_flat, optimize=True)
    db = da_flat.sum(axis=(0, 1))
    dx = da_flat @ wx.T
    return dx, dwx, dwh, db


BILSTM_KEYS = ("fwd.wx", "fwd.wh", "fwd.b", "bwd.wx", "bwd.wh", "bwd.b")


def bilstm_forward(x, params: Mapping[str, np.ndarray]):
    """Bidirectional LSTM whose two direction outputs are averaged elementwise."""
    hf, ctx_f = lstm_forward(x, params["fwd.wx"], params["fwd.wh"], params["fwd.b"])
    hb, ctx_b = lstm_forward(x[:, ::-1], params["bwd.wx"], params["bwd.wh"], params["bwd.b"])
    y = 0.5 * (hf + hb[:, ::-1])
    return y, (ctx_f, ctx_b)


def bilstm_backward(ctx, dy, params: Mapping[str, np.ndarray]):
    """Returns ``(dx, grads)`` with ``grads`` keyed like :data:`BILSTM_KEYS`."""
    ctx_f, ctx_b = ctx
    half = 0.5 * dy
    dxf, *gf = lstm_backward(ctx_f, half, params["fwd.wx"], params["fwd.wh"])
    dxb, *gb = lstm_backward(ctx_b, np.ascontiguousarray(half[:, ::-1]), params["bwd.wx"], params["bwd.wh"])
    grads = dict(zip(BILSTM_KEYS, (*gf, *gb)))
    return dxf + dxb[:, ::-1], grads


def init_bilstm(rng, n_in, n_units, std):
    shapes = {"wx": (n_in, 4 * n_units), "wh": (n_units, 4 * n_units), "b": (4 * n_units,)}
    out = {}
    for direction in ("fwd", "bwd"):
        for name, shape in shapes.items():
            out[f"{direction}.{name}"] = std * rng.standard_normal(shape)
    return out


# --------------------------------------------------------------------------
# losses and optimizers
# --------------------------------------------------------------------------

def mse_loss(x, x_rec):
    """Half squared error summed within a sample, averaged over the batch.

    Returns ``(loss, d loss / d x_rec)``.
    """
    x = np.asarray(x, dtype=DTYPE)
    x_rec = np.asarray(x_rec, dtype=DTYPE)
    if x.shape != x_rec.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_rec.shape}")
    n = x.shape[0] if x.ndim > 1 else 1
    diff = x_rec - x
    return 0.5 * float(np.sum(diff * diff)) / n, diff / n


def sgd_step(params: Iterable[Parameter], learning_rate):
    for p in params:
        p.value -= learning_rate * p.grad


@dataclass
class Adam:
    """Adam with bias-corrected moment estimates."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: Iterable[Parameter]):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(params):
            if i not in self.m:
                self.m[i] = np.zeros_like(p.value)
                self.v[i] = np.zeros_like(p.value)
            m, v = self.m[i], self.v[i]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.value -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params, state: Adam):
    """Functional spelling of :meth:`Adam.step`; returns the state."""
    params = list(params)
    state.step(params)
    return state


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------

def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=DTYPE)
    numeric = np.asarray(numeric, dtype=DTYPE)
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def finite_difference_check(fn: Callable[[], float], params: Iterable[Parameter], h=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``fn`` evaluates the scalar loss from the current parameter values and
    accumulates analytic gradients into ``param.grad``.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    fn()
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.value.reshape(-1)
        numeric = np.empty(flat.size)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = fn()
            flat[j] = orig - h
            down = fn()
            flat[j] = orig
            numeric[j] = (up - down) / (2.0 * h)
        if flat.size:
            worst = max(worst, float(relative_error(a.reshape(-1), numeric).max()))
    for p, a in zip(params, analytic):
        p.grad[...] = a
    return worst
