"""Temporal similarity metrics (EUCL, CID, COR, ACF) with exact gradients.

All metrics are computed pairwise between the rows of two matrices
``A (n, T)`` and ``B (m, T)``. :func:`pairwise_vjp` pulls an upstream gradient
``G (n, m)`` on the distance matrix back to ``A`` and ``B``. Where a metric is
not differentiable (coincident inputs, zero complexity) the gradient is taken
to be zero.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

EPS = 1e-8
MAX_ACF_LAG = 25

# pair-block size used when materialising (n, m, T) differences
_BLOCK_ELEMS = 1 << 22


class MetricKind(str, Enum):
    EUCL = "EUCL"
    CID = "CID"
    COR = "COR"
    ACF = "ACF"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            names = ", ".join(m.value for m in cls)
            raise ValueError(f"unknown metric {value!r}; expected one of {names}") from None


def _as_rows(x, name):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError(f"{name} must be a sequence or a matrix of sequences, got shape {x.shape}")
    return x


def _check_pair(a, b):
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"length mismatch: {a.shape[1]} vs {b.shape[1]}")


# --------------------------------------------------------------------------
# per-sequence features
# --------------------------------------------------------------------------

def complexity_estimate(x):
    """sqrt(sum_t (x[t+1] - x[t])**2) along the last axis."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 2:
        raise ValueError("complexity estimate needs at least 2 time steps")
    d = np.diff(x, axis=-1)
    return np.sqrt(np.sum(d * d, axis=-1))


def _complexity_vjp(x, ce, g):
    d = np.diff(x, axis=-1)
    coef = np.divide(g, ce, out=np.zeros_like(ce), where=ce > 0)[..., None]
    gd = coef * d
    gx = np.zeros_like(x)
    gx[..., 1:] += gd
    gx[..., :-1] -= gd
    return gx


def _normalized(x):
    c = x - x.mean(axis=-1, keepdims=True)
    s = np.sqrt(np.sum(c * c, axis=-1, keepdims=True) + EPS * EPS)
    return c / s, c, s


def _normalized_vjp(c, s, gu):
    gc = gu / s - c * np.sum(c * gu, axis=-1, keepdims=True) / s**3
    return gc - gc.mean(axis=-1, keepdims=True)


def default_max_lag(n):
    return min(MAX_ACF_LAG, n - 2)


def acf_coefficients(x, max_lag=None):
    """Autocorrelation coefficients r(1..max_lag) along the last axis."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if max_lag is None:
        max_lag = default_max_lag(n)
    if max_lag < 1:
        raise ValueError(f"max_lag must be >= 1, got {max_lag}")
    if n < max_lag + 2:
        raise ValueError(f"sequence of length {n} too short for max_lag={max_lag}")
    r, _ = _acf_forward(x, max_lag)
    return r


def _acf_forward(x, max_lag):
    c = x - x.mean(axis=-1, keepdims=True)
    den = np.sum(c * c, axis=-1) + EPS
    num = np.stack([np.sum(c[..., :-lag] * c[..., lag:], axis=-1) for lag in range(1, max_lag + 1)], axis=-1)
    return num / den[..., None], (c, den, num)


def _acf_vjp(cache, gr):
    c, den, num = cache
    max_lag = num.shape[-1]
    gc = np.zeros_like(c)
    gn = gr / den[..., None]
    for j, lag in enumerate(range(1, max_lag + 1)):
        w = gn[..., j:j + 1]
        gc[..., :-lag] += w * c[..., lag:]
        gc[..., lag:] += w * c[..., :-lag]
    gden = -np.sum(gr * num, axis=-1) / den**2
    gc += 2.0 * gden[..., None] * c
    return gc - gc.mean(axis=-1, keepdims=True)


# --------------------------------------------------------------------------
# pairwise euclidean core
# --------------------------------------------------------------------------

def _euclidean(a, b):
    n, m, t = len(a), len(b), a.shape[1]
    out = np.empty((n, m))
    step = max(1, _BLOCK_ELEMS // max(1, m * t))
    for i in range(0, n, step):
        diff = a[i:i + step, None, :] - b[None, :, :]
        out[i:i + step] = np.sqrt(np.einsum("ijt,ijt->ij", diff, diff))
    return out


def _euclidean_vjp(a, b, d, g):
    coef = np.divide(g, d, out=np.zeros_like(d), where=d > 0)
    # sum_j coef_ij (a_i - b_j) and its transpose counterpart, without (n, m, T) temporaries
    ga = coef.sum(axis=1)[:, None] * a - coef @ b
    gb = coef.sum(axis=0)[:, None] * b - coef.T @ a
    return ga, gb


# --------------------------------------------------------------------------
# public pairwise API
# --------------------------------------------------------------------------

def pairwise(kind, A, B, max_lag=None):
    """Distance matrix D[i, j] = d(A[i], B[j])."""
    kind = MetricKind.parse(kind)
    A, B = _as_rows(A, "A"), _as_rows(B, "B")
    _check_pair(A, B)
    return _forward(kind, A, B, max_lag)[0]


def _forward(kind, A, B, max_lag):
    if kind is MetricKind.EUCL:
        d = _euclidean(A, B)
        return d, (d,)
    if kind is MetricKind.CID:
        ed = _euclidean(A, B)
        ca, cb = complexity_estimate(A), complexity_estimate(B)
        hi = np.maximum(ca[:, None], cb[None, :])
        lo = np.minimum(ca[:, None], cb[None, :])
        cf = (hi + EPS) / (lo + EPS)
        return ed * cf, (ed, ca, cb, hi, lo, cf)
    if kind is MetricKind.COR:
        if A.shape[1] < 2:
            raise ValueError("COR needs at least 2 time steps")
        ua, c_a, s_a = _normalized(A)
        ub, c_b, s_b = _normalized(B)
        d = _euclidean(ua, ub)
        return d, (ua, ub, c_a, s_a, c_b, s_b, d)
    if kind is MetricKind.ACF:
        lag = default_max_lag(A.shape[1]) if max_lag is None else max_lag
        if lag < 1 or A.shape[1] < lag + 2:
            raise ValueError(f"sequence of length {A.shape[1]} too short for ACF with max_lag={lag}")
        ra, cache_a = _acf_forward(A, lag)
        rb, cache_b = _acf_forward(B, lag)
        d = _euclidean(ra, rb)
        return d, (ra, rb, cache_a, cache_b, d)
    raise AssertionError(kind)


def pairwise_with_vjp(kind, A, B, max_lag=None):
    """Returns ``(D, vjp)`` where ``vjp(G) -> (dA, dB)``."""
    kind = MetricKind.parse(kind)
    A, B = _as_rows(A, "A"), _as_rows(B, "B")
    _check_pair(A, B)
    d, cache = _forward(kind, A, B, max_lag)

    def vjp(G):
        G = np.asarray(G, dtype=np.float64)
        if kind is MetricKind.EUCL:
            return _euclidean_vjp(A, B, cache[0], G)
        if kind is MetricKind.CID:
            ed, ca, cb, hi, lo, cf = cache
            ga, gb = _euclidean_vjp(A, B, ed, G * cf)
            g_cf = G * ed
            g_hi = g_cf / (lo + EPS)
            g_lo = -g_cf * (hi + EPS) / (lo + EPS) ** 2
            a_is_hi = ca[:, None] >= cb[None, :]
            g_ca = np.where(a_is_hi, g_hi, g_lo).sum(axis=1)
            g_cb = np.where(a_is_hi, g_lo, g_hi).sum(axis=0)
            ga += _complexity_vjp(A, ca, g_ca)
            gb += _complexity_vjp(B, cb, g_cb)
            return ga, gb
        if kind is MetricKind.COR:
            ua, ub, c_a, s_a, c_b, s_b, dd = cache
            gua, gub = _euclidean_vjp(ua, ub, dd, G)
            return _normalized_vjp(c_a, s_a, gua), _normalized_vjp(c_b, s_b, gub)
        ra, rb, cache_a, cache_b, dd = cache
        gra, grb = _euclidean_vjp(ra, rb, dd, G)
        return _acf_vjp(cache_a, gra), _acf_vjp(cache_b, grb)

    return d, vjp


# --------------------------------------------------------------------------
# scalar conveniences
# --------------------------------------------------------------------------

def distance(kind, a, b, max_lag=None):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1:
        raise ValueError("distance expects two 1-D sequences")
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    return float(pairwise(kind, a, b, max_lag)[0, 0])


def eucl(a, b):
    return distance(MetricKind.EUCL, a, b)


def cid(a, b):
    if np.shape(a)[-1] < 2:
        raise ValueError("CID needs at least 2 time steps")
    return distance(MetricKind.CID, a, b)


def cor(a, b):
    return distance(MetricKind.COR, a, b)


def acf(a, b, max_lag=None):
    return distance(MetricKind.ACF, a, b, max_lag)


def metric_gradient(kind, a, b, max_lag=None):
    """(d d/d a, d d/d b) for a single pair of sequences."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("metric_gradient expects two 1-D sequences of equal length")
    _, vjp = pairwise_with_vjp(kind, a, b, max_lag)
    ga, gb = vjp(np.ones((1, 1)))
    return ga[0], gb[0]
