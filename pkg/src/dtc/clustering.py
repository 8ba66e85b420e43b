"""Clustering layer: soft assignment, target distribution, KL loss, joint training."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import hierarchical, nn, similarity, tae
from .similarity import MetricKind

log = logging.getLogger(__name__)

EPS = 1e-12
ROW_SUM_TOL = 1e-9


class TrainingDivergedError(FloatingPointError):
    pass


class InvariantViolation(RuntimeError):
    pass


def init_centroids(Z, k, metric):
    """Complete-linkage on the latents, cut into k groups, one mean per group."""
    Z = np.asarray(Z, dtype=np.float64)
    if len(Z) < k:
        raise ValueError(f"need at least k={k} latent sequences, got {len(Z)}")
    if k == 1:
        return Z.mean(axis=0, keepdims=True)
    D = hierarchical.pairwise_distances(Z, metric)
    labels = hierarchical.cut(hierarchical.complete_linkage(D), k)
    return hierarchical.cluster_means(Z, labels, k)


def _kernel(D, alpha):
    return (1.0 + D / alpha) ** (-(alpha + 1.0) / 2.0)


def soft_assign(Z, centroids, metric, alpha=1.0):
    """Student-t kernel over metric distances, normalised over clusters."""
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    K = _kernel(similarity.pairwise(metric, Z, centroids), alpha)
    return K / K.sum(axis=1, keepdims=True)


def target_distribution(Q, f=None):
    """Sharpened targets q**2 / f renormalised per row; ``f`` defaults to the column sums of Q."""
    Q = np.asarray(Q, dtype=np.float64)
    f = Q.sum(axis=0) if f is None else np.asarray(f, dtype=np.float64)
    w = Q * Q / np.maximum(f, EPS)
    return w / w.sum(axis=1, keepdims=True)


def kl_loss(P, Q):
    """sum_ij p_ij log(p_ij / q_ij), with 0 log 0 = 0.

    Summed as p log(p/q) - p + q, which equals the KL divergence for
    row-stochastic P and Q but is non-negative term by term, so round-off
    cannot push the total below zero.
    """
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if P.shape != Q.shape:
        raise ValueError(f"shape mismatch: {P.shape} vs {Q.shape}")
    Qc = np.maximum(Q, EPS)
    safe_p = np.where(P > 0, P, 1.0)
    terms = np.where(P > 0, P * (np.log(safe_p) - np.log(Qc)), 0.0) - P + Qc
    return float(np.maximum(terms, 0.0).sum())


def clustering_gradients(Z, centroids, P, metric, alpha=1.0):
    """Gradient of ``kl_loss(P, soft_assign(Z, centroids))`` with P held fixed.

    Returns ``(loss, d/d centroids, d/d Z)``.
    """
    D, vjp = similarity.pairwise_with_vjp(metric, Z, centroids)
    K = _kernel(D, alpha)
    S = K.sum(axis=1, keepdims=True)
    Q = K / S
    P = np.asarray(P, dtype=np.float64)
    loss = kl_loss(P, Q)
    gQ = -P / np.maximum(Q, EPS)
    gK = (gQ - np.sum(gQ * Q, axis=1, keepdims=True)) / S
    gD = gK * K * (-(alpha + 1.0) / (2.0 * alpha)) / (1.0 + D / alpha)
    gZ, gW = vjp(gD)
    return loss, gW, gZ


def hard_assign(Q):
    return np.argmax(np.asarray(Q), axis=1)


def _check_rows(M, what):
    err = float(np.max(np.abs(M.sum(axis=1) - 1.0)))
    if not err <= ROW_SUM_TOL:
        raise InvariantViolation(f"{what} rows deviate from 1 by {err:.3e}")
    return err


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass
class TrainConfig:
    k: int = 2
    metric: MetricKind = MetricKind.CID
    alpha: float = 1.0
    batch_size: int = 64
    learning_rate: float = 0.1
    convergence_tol: float = 0.001
    max_epochs: int = 100
    # epochs before the convergence test applies; hard labels can be frozen
    # for a while after a lopsided initial cut although Q keeps moving
    min_epochs: int = 20
    joint: bool = True
    target_refresh: str = "batch"  # or "epoch"
    kl_reduction: str = "mean"  # or "sum" over the mini-batch
    # multiplies the per-time-step reconstruction gradient in joint training
    reconstruction_weight: float = 10.0
    empty_mass_frac: float = 1e-3
    # also treat a centroid that wins (almost) no hard assignments as empty
    reseed_without_members: bool = False
    # with reseed_without_members: the member share below which a centroid counts as empty
    min_member_frac: float = 0.0

    def __post_init__(self):
        self.metric = MetricKind.parse(self.metric)
        if self.k < 1 or self.batch_size < 1 or self.max_epochs < 1 or self.min_epochs < 1:
            raise ValueError("k, batch_size, max_epochs and min_epochs must be positive")
        if self.alpha <= 0 or self.learning_rate < 0:
            raise ValueError("alpha must be positive and learning_rate non-negative")
        if not 0 < self.convergence_tol < 1:
            raise ValueError(f"convergence_tol must be in (0, 1), got {self.convergence_tol}")
        if self.target_refresh not in ("batch", "epoch"):
            raise ValueError(f"target_refresh must be 'batch' or 'epoch', got {self.target_refresh!r}")
        if not 0 <= self.min_member_frac < 1.0 / self.k:
            raise ValueError(f"min_member_frac must be in [0, 1/k), got {self.min_member_frac}")
        if self.kl_reduction not in ("sum", "mean"):
            raise ValueError(f"kl_reduction must be 'sum' or 'mean', got {self.kl_reduction!r}")

    def to_dict(self):
        d = asdict(self)
        d["metric"] = self.metric.value
        return d


@dataclass
class EpochRecord:
    epoch: int
    kl_loss: float
    mse_loss: float
    assignment_change_fraction: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    converged: bool = False
    max_row_sum_error: float = 0.0
    min_kl: float = np.inf
    reinitialized: int = 0

    @property
    def final_change(self):
        return self.records[-1].assignment_change_fraction if self.records else 1.0

    def write_csv(self, path, comment=None):
        with open(path, "w", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            w = csv.writer(fh)
            w.writerow(["epoch", "kl_loss", "mse_loss", "assignment_change_fraction"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.kl_loss), repr(r.mse_loss), repr(r.assignment_change_fraction)])


@dataclass
class TrainResult:
    model: tae.TaeModel
    centroids: np.ndarray
    Q: np.ndarray
    history: TrainHistory

    @property
    def labels(self):
        return hard_assign(self.Q)


def _mean_reconstruction(model, X, batch_size=256):
    total = 0.0
    for i in range(0, len(X), batch_size):
        xb = X[i:i + batch_size]
        total += tae.reconstruction_loss(model, xb, backward=False) * len(xb)
    return total / len(X)


def train_dtc(model: tae.TaeModel, X, config: TrainConfig, seed=0, centroids=None, pretrained=True):
    """Joint optimisation of the clustering KL loss and the reconstruction loss.

    Each epoch refreshes Q and P over the whole dataset, then walks shuffled
    mini-batches taking one SGD step on the KL loss (centroids and encoder)
    followed by one on the reconstruction loss (whole autoencoder). Training
    stops once fewer than ``convergence_tol`` of the hard assignments change
    between consecutive epochs. With ``config.joint = False`` the encoder is
    frozen and only the centroids move.
    """
    if not pretrained:
        raise ValueError("train_dtc expects a pretrained autoencoder (pass pretrained=True once pretrained)")
    X = np.asarray(X, dtype=np.float64)
    if not np.all(np.isfinite(X)):
        raise ValueError("input sequences contain non-finite values")
    n = len(X)
    if n < config.k:
        raise ValueError(f"need at least k={config.k} sequences, got {n}")
    rng = np.random.default_rng(seed)
    metric, alpha, lr = config.metric, config.alpha, config.learning_rate

    Z = tae.encode_batched(model, X)
    W = nn.Parameter(init_centroids(Z, config.k, metric) if centroids is None else centroids)
    # the reconstruction step descends the per-time-step mean so lr does not scale with L
    rec_scale = config.reconstruction_weight / model.config.input_length
    encoder = model.encoder_params()
    everything = model.parameters()
    history = TrainHistory()
    prev = None
    Q = None

    for epoch in range(1, config.max_epochs + 1):
        if config.joint or epoch == 1:
            Z = tae.encode_batched(model, X)
        Q = soft_assign(Z, W.value, metric, alpha)
        f = Q.sum(axis=0)
        P = target_distribution(Q, f)
        kl = kl_loss(P, Q)
        history.max_row_sum_error = max(history.max_row_sum_error, _check_rows(Q, "Q"), _check_rows(P, "P"))
        if not np.isfinite(kl) or kl < 0:
            raise TrainingDivergedError(f"epoch {epoch}: invalid KL loss {kl}")
        history.min_kl = min(history.min_kl, kl)
        mse = _mean_reconstruction(model, X)
        if not np.isfinite(mse):
            raise TrainingDivergedError(f"epoch {epoch}: non-finite reconstruction loss")
        labels = hard_assign(Q)
        change = 1.0 if prev is None else float(np.mean(labels != prev))
        history.records.append(EpochRecord(epoch, kl / n, mse, change))
        log.debug("epoch %d kl=%.6g mse=%.6g change=%.4f", epoch, kl / n, mse, change)
        if prev is not None and epoch > config.min_epochs and change < config.convergence_tol:
            history.converged = True
            break
        prev = labels
        if epoch == config.max_epochs:
            break

        starved = f < config.empty_mass_frac * n
        if config.reseed_without_members:
            counts = np.bincount(labels, minlength=config.k)
            starved |= counts < max(1.0, config.min_member_frac * n)
        starved = np.flatnonzero(starved)
        for j in starved:
            W.value[j] = Z[int(np.argmin(Q.max(axis=1)))]
            history.reinitialized += 1

        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb = X[idx]
            model.zero_grad()
            W.zero_grad()
            if config.joint:
                zb, ctx = tae.encode_forward(model, xb)
                zb = zb[:, :, 0]
            else:
                zb = Z[idx]
            if config.target_refresh == "batch":
                qb = soft_assign(zb, W.value, metric, alpha)
                pb = target_distribution(qb, f)
                history.max_row_sum_error = max(history.max_row_sum_error, _check_rows(qb, "Q"), _check_rows(pb, "P"))
            else:
                pb = P[idx]
            loss, gW, gZ = clustering_gradients(zb, W.value, pb, metric, alpha)
            if not np.isfinite(loss) or loss < 0:
                raise TrainingDivergedError(f"epoch {epoch}: invalid batch KL loss {loss}")
            history.min_kl = min(history.min_kl, loss)
            scale = 1.0 / len(idx) if config.kl_reduction == "mean" else 1.0
            W.grad += scale * gW
            if config.joint:
                tae.encode_backward(model, ctx, (scale * gZ)[:, :, None])
                nn.sgd_step(encoder, lr)
            nn.sgd_step([W], lr)
            if config.joint:
                model.zero_grad()
                rec = tae.reconstruction_loss(model, xb, grad_scale=rec_scale)
                if not np.isfinite(rec):
                    raise TrainingDivergedError(f"epoch {epoch}: non-finite batch reconstruction loss")
                nn.sgd_step(everything, lr)

    return TrainResult(model, W.value.copy(), Q, history)
