"""Temporal autoencoder: conv -> leaky ReLU -> maxpool -> BiLSTM -> BiLSTM, and back."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TaeConfig:
    input_length: int
    pool_size: int
    n_filters: int = 50
    kernel_size: int = 10
    lstm_units: tuple = (50, 1)
    leaky_slope: float = 0.01
    input_channels: int = 1
    init_std: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "lstm_units", tuple(int(u) for u in self.lstm_units))
        if self.pool_size < 1:
            raise ValueError(f"pool_size must be >= 1, got {self.pool_size}")
        if self.kernel_size < 1 or self.kernel_size > self.input_length:
            raise ValueError(
                f"kernel_size must be in [1, input_length={self.input_length}], got {self.kernel_size}"
            )
        if self.latent_length < 2:
            raise ValueError(
                f"latent length ceil({self.input_length}/{self.pool_size}) = {self.latent_length} must be >= 2"
            )
        if not self.lstm_units or self.lstm_units[-1] != 1:
            raise ValueError(f"the last BiLSTM must have exactly 1 unit, got {self.lstm_units}")
        if self.n_filters < 1 or self.input_channels != 1:
            raise ValueError("n_filters must be positive and input_channels must be 1")
        if self.init_std < 0:
            raise ValueError("init_std must be non-negative")

    @property
    def latent_length(self):
        return nn.pooled_length(self.input_length, self.pool_size)

    def to_dict(self):
        d = asdict(self)
        d["lstm_units"] = list(self.lstm_units)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class TaeModel:
    config: TaeConfig
    params: dict = field(default_factory=dict)

    def encoder_params(self):
        return [p for k, p in self.params.items() if not k.startswith("deconv.")]

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def copy(self):
        return TaeModel(self.config, {k: nn.Parameter(p.value.copy()) for k, p in self.params.items()})

    def _lstm(self, i):
        prefix = f"lstm{i}."
        return {k[len(prefix):]: p.value for k, p in self.params.items() if k.startswith(prefix)}


def init_tae(config: TaeConfig, seed=0) -> TaeModel:
    """All weights and biases drawn from N(0, init_std**2)."""
    rng = np.random.default_rng(seed)
    std = config.init_std
    c = config
    values = {
        "conv.w": std * rng.standard_normal((c.kernel_size, c.input_channels, c.n_filters)),
        "conv.b": std * rng.standard_normal(c.n_filters),
    }
    n_in = c.n_filters
    for i, units in enumerate(c.lstm_units, start=1):
        for k, v in nn.init_bilstm(rng, n_in, units, std).items():
            values[f"lstm{i}.{k}"] = v
        n_in = units
    values["deconv.w"] = std * rng.standard_normal((c.kernel_size, c.input_channels, 1))
    values["deconv.b"] = std * rng.standard_normal(c.input_channels)
    return TaeModel(config, {k: nn.Parameter(v) for k, v in values.items()})


def _as_batch(x, length, what="input"):
    x = np.asarray(x, dtype=nn.DTYPE)
    if x.ndim == 1:
        x = x[None, :, None]
    elif x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3 or x.shape[2] != 1:
        raise ValueError(f"{what} must be univariate, got shape {x.shape}")
    if x.shape[1] != length:
        raise ValueError(f"{what} length {x.shape[1]} does not match expected {length}")
    return x


def encode_forward(model: TaeModel, x):
    """Batched encoder pass. ``x`` is (B, L[, 1]); returns ((B, T, 1), context)."""
    c = model.config
    x = _as_batch(x, c.input_length)
    p = model.params
    h, conv_ctx = nn.conv1d_forward(x, p["conv.w"].value, p["conv.b"].value)
    h, act_ctx = nn.leaky_relu_forward(h, c.leaky_slope)
    h, pool_ctx = nn.maxpool1d_forward(h, c.pool_size)
    lstm_ctxs = []
    for i in range(1, len(c.lstm_units) + 1):
        h, lctx = nn.bilstm_forward(h, model._lstm(i))
        lstm_ctxs.append(lctx)
    return h, (conv_ctx, act_ctx, pool_ctx, lstm_ctxs)


def encode_backward(model: TaeModel, ctx, dz):
    """Accumulates encoder parameter gradients from d loss / d z (B, T, 1)."""
    conv_ctx, act_ctx, pool_ctx, lstm_ctxs = ctx
    p = model.params
    g = np.asarray(dz, dtype=nn.DTYPE).reshape(dz.shape[0], -1, 1)
    for i in range(len(lstm_ctxs), 0, -1):
        g, grads = nn.bilstm_backward(lstm_ctxs[i - 1], g, model._lstm(i))
        for k, v in grads.items():
            p[f"lstm{i}.{k}"].grad += v
    g = nn.maxpool1d_backward(pool_ctx, g)
    g = nn.leaky_relu_backward(act_ctx, g)
    dx, dw, db = nn.conv1d_backward(conv_ctx, g)
    p["conv.w"].grad += dw
    p["conv.b"].grad += db
    return dx


def decode_forward(model: TaeModel, z):
    c = model.config
    z = np.asarray(z, dtype=nn.DTYPE)
    if z.ndim == 2:
        z = z[:, :, None]
    if z.ndim != 3 or z.shape[1] != c.latent_length:
        raise ValueError(f"latent must have length {c.latent_length}, got shape {z.shape}")
    u, factor = nn.upsample1d_forward(z, c.pool_size)
    u = u[:, :c.input_length]
    p = model.params
    y, dctx = nn.deconv1d_forward(u, p["deconv.w"].value, p["deconv.b"].value)
    return y, (factor, u.shape[1], dctx)


def decode_backward(model: TaeModel, ctx, dy):
    factor, length, dctx = ctx
    du, dw, db = nn.deconv1d_backward(dctx, dy)
    model.params["deconv.w"].grad += dw
    model.params["deconv.b"].grad += db
    c = model.config
    full = np.zeros((du.shape[0], c.latent_length * factor, du.shape[2]))
    full[:, :length] = du
    return nn.upsample1d_backward(factor, full)


def encode(model: TaeModel, x):
    """Latent sequences for a single sequence (L,) or a batch (B, L).

    Returns shape (T,) or (B, T) with T = ceil(L / P).
    """
    single = np.ndim(x) == 1
    z, _ = encode_forward(model, x)
    z = z[:, :, 0]
    return z[0] if single else z


def decode(model: TaeModel, z):
    single = np.ndim(z) == 1
    z = np.asarray(z, dtype=nn.DTYPE)
    y, _ = decode_forward(model, z[None] if single else z)
    y = y[:, :, 0]
    return y[0] if single else y


def encode_batched(model: TaeModel, X, batch_size=256):
    X = np.asarray(X, dtype=nn.DTYPE)
    return np.concatenate([encode(model, X[i:i + batch_size]) for i in range(0, len(X), batch_size)])


def reconstruction_loss(model: TaeModel, X, backward=True, grad_scale=1.0):
    """Batch-mean reconstruction loss; accumulates gradients into all parameters.

    ``grad_scale`` multiplies the accumulated gradient only; the returned loss
    is unscaled.
    """
    x = _as_batch(X, model.config.input_length)
    z, ectx = encode_forward(model, x)
    y, dctx = decode_forward(model, z)
    loss, dy = nn.mse_loss(x, y)
    if backward:
        if grad_scale != 1.0:
            dy = dy * grad_scale
        dz = decode_backward(model, dctx, dy)
        encode_backward(model, ectx, dz)
    return loss


def pretrain(model: TaeModel, X, epochs=10, batch_size=64, learning_rate=0.01, seed=0, optimizer=None):
    """Adam pretraining on reconstruction loss.

    Returns ``(model, loss_history)`` where each entry is the mean batch loss
    of one epoch. Batches are drawn from a seeded permutation.
    """
    X = np.asarray(X, dtype=nn.DTYPE)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("pretraining needs a non-empty (n, L) array of sequences")
    if X.shape[1] != model.config.input_length:
        raise ValueError(f"sequence length {X.shape[1]} != model input length {model.config.input_length}")
    rng = np.random.default_rng(seed)
    opt = optimizer or nn.Adam(learning_rate=learning_rate)
    params = model.parameters()
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(X))
        losses, weights = [], []
        for start in range(0, len(X), batch_size):
            idx = order[start:start + batch_size]
            model.zero_grad()
            loss = reconstruction_loss(model, X[idx])
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite reconstruction loss at epoch {epoch + 1}")
            opt.step(params)
            losses.append(loss)
            weights.append(len(idx))
        history.append(float(np.average(losses, weights=weights)))
        log.debug("pretrain epoch %d loss %.6f", epoch + 1, history[-1])
    return model, history
