import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtc import evaluation as ev


def pair_auc(scores, labels):
    """Fraction of (positive, negative) pairs ranked correctly, ties counting one half."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_roc_examples():
    c = ev.roc_curve([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
    assert (0.0, 1.0) in c.points()
    assert ev.auc(c) == 1.0
    assert ev.roc_auc([0.9, 0.2, 0.8, 0.1], [1, 1, 0, 0]) == pytest.approx(0.75, abs=1e-12)
    assert ev.roc_auc(np.full(6, 0.3), [0, 1, 0, 1, 1, 0]) == 0.5


def test_roc_rejects_bad_labels():
    with pytest.raises(ValueError, match="both classes"):
        ev.roc_curve([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError, match="0/1"):
        ev.roc_curve([0.1, 0.2], [0, 2])
    with pytest.raises(ValueError, match="labels"):
        ev.roc_curve([0.1, 0.2, 0.3], [0, 1])


scores_labels = st.integers(2, 40).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 6), min_size=n, max_size=n),
    st.lists(st.integers(0, 1), min_size=n, max_size=n).filter(lambda y: 0 < sum(y) < len(y)),
))


@settings(max_examples=200, deadline=None)
@given(scores_labels)
def test_auc_matches_pair_count(data):
    s, y = data
    s = np.array(s, dtype=float)
    assert ev.roc_auc(s, y) == pytest.approx(pair_auc(s, y), abs=1e-12)
    c = ev.roc_curve(s, y)
    assert c.points()[0] == (0.0, 0.0) and c.points()[-1] == (1.0, 1.0)
    assert np.all(np.diff(c.fpr) >= 0) and np.all(np.diff(c.tpr) >= 0)
    # strictly increasing transforms leave the AUC alone
    assert ev.roc_auc(np.exp(s) * 3 - 1, y) == pytest.approx(ev.roc_auc(s, y), abs=1e-12)


def test_align_and_score_examples():
    y = np.array([0, 0, 1, 1, 0, 1])
    Q = np.stack([y * 0.8 + 0.1, 1 - (y * 0.8 + 0.1)], axis=1)
    assert ev.aligned_auc(Q, y) == 1.0
    assert ev.aligned_auc(Q[:, ::-1], y) == 1.0
    np.testing.assert_array_equal(ev.align_and_score(Q), Q[:, 0])
    with pytest.raises(ValueError, match="k=2"):
        ev.align_and_score(np.ones((3, 3)) / 3)
    with pytest.raises(ValueError, match="length"):
        ev.align_and_score(Q, y[:3])


def test_oriented_score_has_aligned_auc():
    rng = np.random.default_rng(0)
    for _ in range(20):
        q = rng.random(30)
        y = np.r_[0, 1, rng.integers(0, 2, 28)]
        Q = np.stack([q, 1 - q], axis=1)
        s = ev.oriented_score(Q, y)
        assert ev.roc_auc(s, y) == pytest.approx(ev.aligned_auc(Q, y), abs=1e-12)


def test_random_assignments_near_chance():
    rng = np.random.default_rng(1)
    aucs = []
    for _ in range(200):
        q = rng.random(100)
        y = rng.integers(0, 2, 100)
        aucs.append(ev.aligned_auc(np.stack([q, 1 - q], axis=1), y))
    aucs = np.array(aucs)
    assert np.all(aucs >= 0.5)
    # the max(a, 1 - a) fold leaves a small upward bias of about E|a - 0.5|
    assert 0.5 < aucs.mean() < 0.56


def test_best_permutation_accuracy():
    assert ev.best_permutation_accuracy([0, 0, 1, 1], [1, 1, 0, 0]) == 1.0
    assert ev.best_permutation_accuracy([0, 1, 1, 1], [0, 0, 1, 1]) == 0.75


def test_bootstrap_examples():
    y = np.array([0] * 10 + [1] * 10)
    s = y + 0.01 * np.arange(20)
    mean, stderr, vals = ev.bootstrap_auc(s, y, n_runs=10, seed=3)
    assert mean == 1.0 and stderr == 0.0 and len(vals) == 10

    rng = np.random.default_rng(4)
    s = rng.random(20)
    m1, se1, v1 = ev.bootstrap_auc(s, y, n_runs=1, seed=5)
    idx = np.random.default_rng(5).integers(0, 20, 20)
    while y[idx].min() == y[idx].max():
        idx = np.random.default_rng(5).integers(0, 20, 20)
    assert m1 == pytest.approx(ev.roc_auc(s[idx], y[idx]), abs=1e-15) and se1 == 0.0


def test_bootstrap_consistent_with_plain_auc():
    rng = np.random.default_rng(6)
    y = rng.integers(0, 2, 600)
    s = y + rng.standard_normal(600)
    mean, _, _ = ev.bootstrap_auc(s, y, n_runs=10, seed=7)
    assert abs(mean - ev.roc_auc(s, y)) < 0.02


def test_bootstrap_redraws_single_class_resamples():
    y = np.array([0] * 9 + [1])
    s = np.arange(10.0)
    _, _, vals = ev.bootstrap_auc(s, y, n_runs=25, seed=0)
    assert len(vals) == 25 and np.all(np.isfinite(vals))


def test_bootstrap_seeded():
    rng = np.random.default_rng(8)
    s, y = rng.random(50), np.r_[0, 1, rng.integers(0, 2, 48)]
    assert ev.bootstrap_auc(s, y, seed=2)[0] == ev.bootstrap_auc(s, y, seed=2)[0]


def test_summarize():
    m, se = ev.summarize([0.8, 0.9, 1.0])
    assert m == pytest.approx(0.9)
    assert se == pytest.approx(0.1 / np.sqrt(3))
    assert ev.summarize([0.7]) == (0.7, 0.0)


def test_report_outputs(tmp_path):
    c = ev.roc_curve([0.9, 0.2, 0.8, 0.1], [1, 1, 0, 0])
    rep = ev.EvaluationReport("toy", "DTC", "CID", 0.75, 0.0, [0.75], meta={"N": np.int64(4)},
                              config={"seed": 0}, roc=[c.points()])
    rep.write_json(tmp_path / "r.json")
    back = json.loads((tmp_path / "r.json").read_text())
    assert back["auc_mean"] == 0.75 and back["meta"] == {"N": 4}
    rep.write_roc_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0].startswith("# ") and json.loads(lines[0][2:])["method"] == "DTC"
    assert lines[1] == "trial,fpr,tpr"
    assert len(lines) == 2 + len(c.points())
