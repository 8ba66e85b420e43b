"""ROC/AUC scoring, bootstrap averaging and report emission."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    def points(self):
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(int)
    if scores.shape != labels.shape:
        raise ValueError(f"{len(scores)} scores but {len(labels)} labels")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    if labels.min() == labels.max():
        raise ValueError("ROC needs both classes present")
    return scores, labels


def roc_curve(scores, labels) -> RocCurve:
    """Threshold sweep over distinct scores (descending); tied scores move together."""
    scores, labels = _check_binary(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    pos, neg = y.sum(), len(y) - y.sum()
    fpr = np.r_[0.0, fp / neg]
    tpr = np.r_[0.0, tp / pos]
    return RocCurve(fpr, tpr, np.r_[np.inf, s[last]])


def auc(curve: RocCurve):
    """Trapezoidal area under the ROC curve."""
    return float(np.sum(np.diff(curve.fpr) * (curve.tpr[1:] + curve.tpr[:-1]) / 2.0))


def roc_auc(scores, labels):
    return auc(roc_curve(scores, labels))


def align_and_score(Q, labels=None):
    """Per-sample score q_i0 from a two-column assignment matrix."""
    Q = np.asarray(Q, dtype=np.float64)
    if Q.ndim != 2 or Q.shape[1] != 2:
        raise ValueError(f"binary evaluation needs k=2, got Q of shape {Q.shape}")
    if labels is not None and len(labels) != len(Q):
        raise ValueError("labels and Q disagree in length")
    return Q[:, 0]


def aligned_auc(Q, labels):
    """AUC of the cluster-0 probability, flipped when the clusters are reversed."""
    a = roc_auc(align_and_score(Q, labels), labels)
    return max(a, 1.0 - a)


def oriented_score(Q, labels):
    """q_i0, negated when that ranks the positive class lower, so its AUC is the aligned AUC."""
    s = align_and_score(Q, labels)
    return s if roc_auc(s, labels) >= 0.5 else -s


def best_permutation_accuracy(pred, labels):
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    acc = float(np.mean(pred == labels))
    return max(acc, 1.0 - acc)


def bootstrap_auc(scores, labels, n_runs=10, seed=0, aligned=False):
    """Mean and standard error of the AUC over resamples drawn with replacement.

    Resamples missing one class are redrawn. With ``aligned`` each AUC is
    folded to ``max(a, 1 - a)``.
    """
    scores, labels = _check_binary(scores, labels)
    rng = np.random.default_rng(seed)
    n = len(scores)
    values = []
    while len(values) < n_runs:
        idx = rng.integers(0, n, n)
        if labels[idx].min() == labels[idx].max():
            continue
        a = roc_auc(scores[idx], labels[idx])
        values.append(max(a, 1.0 - a) if aligned else a)
    values = np.array(values)
    stderr = float(values.std(ddof=1) / np.sqrt(n_runs)) if n_runs > 1 else 0.0
    return float(values.mean()), stderr, values


@dataclass
class EvaluationReport:
    dataset: str
    method: str
    metric: str
    auc_mean: float
    auc_stderr: float
    trial_aucs: list
    meta: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    roc: list = field(default_factory=list)  # per trial list of (fpr, tpr)

    def to_dict(self):
        return asdict(self)

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")

    def write_roc_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(f"# {json.dumps({'config': self.config, 'method': self.method}, sort_keys=True, default=_json_default)}\n")
            w = csv.writer(fh)
            w.writerow(["trial", "fpr", "tpr"])
            for trial, points in enumerate(self.roc):
                for fpr, tpr in points:
                    w.writerow([trial, repr(fpr), repr(tpr)])


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if hasattr(o, "value"):
        return o.value
    raise TypeError(f"cannot serialise {type(o).__name__}")


def summarize(trial_aucs):
    a = np.asarray(trial_aucs, dtype=np.float64)
    stderr = float(a.std(ddof=1) / np.sqrt(len(a))) if len(a) > 1 else 0.0
    return float(a.mean()), stderr
