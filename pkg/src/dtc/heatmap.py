"""Event localisation with class activation maps.

A small supervised convolutional classifier is fitted to the cluster labels;
the class-weighted sum of its last feature maps, stretched back to the input
length, marks where the evidence for a class sits in time.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import nn


@dataclass(frozen=True)
class LocalizerConfig:
    n_filters: int = 32
    kernel_size: int = 10
    pools: tuple = (4, 4)
    leaky_slope: float = 0.01
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 200
    target_accuracy: float = 0.95


@dataclass
class LocalizerModel:
    config: LocalizerConfig
    n_classes: int
    input_length: int
    params: dict = field(default_factory=dict)
    train_accuracy: float = 0.0
    epochs_run: int = 0

    def parameters(self):
        return list(self.params.values())

    @property
    def stride(self):
        return int(np.prod(self.config.pools))


def _as_batch(X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None]
    return X[:, :, None]


def _features(model, X):
    c = model.config
    p = model.params
    h = _as_batch(X)
    ctxs = []
    for i, pool in enumerate(c.pools):
        h, cctx = nn.conv1d_forward(h, p[f"conv{i}.w"].value, p[f"conv{i}.b"].value)
        h, actx = nn.leaky_relu_forward(h, c.leaky_slope)
        h, pctx = nn.maxpool1d_forward(h, pool)
        ctxs.append((cctx, actx, pctx))
    return h, ctxs


def _logits(model, X):
    A, ctxs = _features(model, X)
    g = A.mean(axis=1)
    return g @ model.params["fc.w"].value.T + model.params["fc.b"].value, (A, g, ctxs)


def _backward(model, cache, dlogits):
    A, g, ctxs = cache
    p = model.params
    p["fc.w"].grad += dlogits.T @ g
    p["fc.b"].grad += dlogits.sum(axis=0)
    dg = dlogits @ p["fc.w"].value
    dh = np.repeat(dg[:, None, :] / A.shape[1], A.shape[1], axis=1)
    for i in range(len(ctxs) - 1, -1, -1):
        cctx, actx, pctx = ctxs[i]
        dh = nn.maxpool1d_backward(pctx, dh)
        dh = nn.leaky_relu_backward(actx, dh)
        dh, dw, db = nn.conv1d_backward(cctx, dh)
        p[f"conv{i}.w"].grad += dw
        p[f"conv{i}.b"].grad += db


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict_proba(model, X):
    return _softmax(_logits(model, X)[0])


def predict(model, X):
    return np.argmax(predict_proba(model, X), axis=1)


def init_localizer(input_length, n_classes=2, seed=0, config=LocalizerConfig()):
    """He-scaled convolutions; the class weights start at zero so swapping labels mirrors training."""
    rng = np.random.default_rng(seed)
    params = {}
    cin = 1
    length = input_length
    for i, pool in enumerate(config.pools):
        if config.kernel_size > length:
            raise ValueError(f"input length {input_length} too short for the localizer")
        fan_in = cin * config.kernel_size
        params[f"conv{i}.w"] = np.sqrt(2.0 / fan_in) * rng.standard_normal((config.kernel_size, cin, config.n_filters))
        params[f"conv{i}.b"] = np.zeros(config.n_filters)
        cin = config.n_filters
        length = nn.pooled_length(length, pool)
    params["fc.w"] = np.zeros((n_classes, cin))
    params["fc.b"] = np.zeros(n_classes)
    return LocalizerModel(config, n_classes, input_length, {k: nn.Parameter(v) for k, v in params.items()})


def train_localizer(X, cluster_labels, seed=0, config=LocalizerConfig(), n_classes=None):
    """Cross-entropy training on cluster labels until the target training accuracy or the epoch cap."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(cluster_labels, dtype=int)
    if len(X) != len(y):
        raise ValueError("one cluster label per sequence is required")
    if len(np.unique(y)) < 2:
        raise ValueError("localizer training needs at least two distinct cluster labels")
    k = n_classes or int(y.max()) + 1
    model = init_localizer(X.shape[1], k, seed, config)
    rng = np.random.default_rng(seed + 1)
    opt = nn.Adam(learning_rate=config.learning_rate)
    params = model.parameters()
    onehot = np.eye(k)[y]
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(X))
        for start in range(0, len(X), config.batch_size):
            idx = order[start:start + config.batch_size]
            for prm in params:
                prm.zero_grad()
            logits, cache = _logits(model, X[idx])
            dlogits = (_softmax(logits) - onehot[idx]) / len(idx)
            _backward(model, cache, dlogits)
            opt.step(params)
        model.epochs_run = epoch
        model.train_accuracy = float(np.mean(predict(model, X) == y))
        if model.train_accuracy >= config.target_accuracy:
            break
    return model


def class_activation(model, X, target_class):
    """Raw CAM at feature-map resolution, shape (B, T')."""
    A, _ = _features(model, X)
    return A @ model.params["fc.w"].value[target_class]


def raw_peak(model, X, target_class):
    return class_activation(model, X, target_class).max(axis=1)


def generate_heatmap(model, x, target_class):
    """Per-time-step relevance of ``x`` for ``target_class``, min-max scaled to [0, 1].

    Accepts one sequence (L,) or a batch (B, L).
    """
    single = np.ndim(x) == 1
    cam = class_activation(model, x, target_class)
    L = model.input_length
    s = model.stride
    centers = (np.arange(cam.shape[1]) + 0.5) * s - 0.5
    t = np.arange(L)
    up = np.stack([np.interp(t, centers, row) for row in cam])
    lo = up.min(axis=1, keepdims=True)
    span = up.max(axis=1, keepdims=True) - lo
    out = np.divide(up - lo, span, out=np.zeros_like(up), where=span > 0)
    return out[0] if single else out


def localization_rate(heatmaps, windows):
    """Fraction of heatmaps whose argmax lands inside one of the sequence's windows."""
    from .dataio import in_any_window

    hits = [in_any_window(int(np.argmax(h)), w) for h, w in zip(heatmaps, windows)]
    return float(np.mean(hits))


def write_heatmap_csv(path, x, heat, comment=None):
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(["t", "value", "heatmap"])
        for t, (v, h) in enumerate(zip(x, heat)):
            w.writerow([t, repr(float(v)), repr(float(h))])
