import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sedmamba.errors import DimensionError, UndefinedMetricError
from sedmamba.metrics import (ErrorInstance, average_precision, group_instances, roc_auc, stratified_eval,
                              write_curve_csv)


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def enumerated_ap(scores, labels):
    scores, labels = np.asarray(scores), np.asarray(labels)
    n_pos = labels.sum()
    ap, prev_recall = 0.0, 0.0
    for tau in sorted(set(scores.tolist()), reverse=True):
        predicted = scores >= tau
        tp = int(np.sum(predicted & (labels == 1)))
        recall = tp / n_pos
        precision = tp / int(predicted.sum())
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def random_instance(rng):
    n = int(rng.integers(2, 201))
    labels = rng.integers(0, 2, n)
    labels[rng.integers(n)] = 1
    labels[rng.integers(n)] = 0 if labels.sum() > 1 else labels[rng.integers(n)]
    if labels.sum() == n:
        labels[0] = 0
    if labels.sum() == 0:
        labels[0] = 1
    # coarse scores force plenty of ties
    scores = np.round(rng.random(n), int(rng.integers(1, 4)))
    return scores, labels


# ---------------------------------------------------------------------------
# AUC and AP
# ---------------------------------------------------------------------------

def test_auc_examples():
    assert roc_auc([0.9, 0.1], [1, 0]) == 1.0
    assert roc_auc([0.3] * 5, [1, 0, 1, 0, 0]) == 0.5
    assert roc_auc([0.8, 0.7, 0.6, 0.2], [1, 0, 1, 0]) == 0.75


def test_ap_examples():
    assert average_precision([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
    assert average_precision([0.8, 0.7, 0.6, 0.2], [1, 0, 1, 0]) == pytest.approx(0.5 + 0.5 * 2 / 3, abs=1e-15)
    worst = [0.9, 0.8, 0.2, 0.1]
    assert average_precision(worst, [0, 0, 1, 1]) == pytest.approx(enumerated_ap(worst, [0, 0, 1, 1]), abs=1e-15)


def test_metrics_match_brute_force():
    rng = np.random.default_rng(99)
    for _ in range(500):
        scores, labels = random_instance(rng)
        assert abs(roc_auc(scores, labels) - pairwise_auc(scores, labels)) < 1e-9
        assert abs(average_precision(scores, labels) - enumerated_ap(scores, labels)) < 1e-9


def test_undefined_metrics():
    with pytest.raises(UndefinedMetricError):
        roc_auc([0.1, 0.2], [1, 1])
    with pytest.raises(UndefinedMetricError):
        average_precision([0.1, 0.2], [0, 0])
    with pytest.raises(UndefinedMetricError):
        roc_auc([], [])
    with pytest.raises(DimensionError):
        roc_auc([0.1, 0.2], [1])
    with pytest.raises(DimensionError):
        roc_auc([0.1, 0.2], [1, 2])


scores_and_labels = st.integers(2, 60).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 1000).map(lambda k: k / 1000), min_size=n, max_size=n),
    st.lists(st.integers(0, 1), min_size=n, max_size=n),
)).filter(lambda t: 0 < sum(t[1]) < len(t[1]))


@settings(max_examples=200, deadline=None)
@given(scores_and_labels)
def test_invariant_under_increasing_transform(data):
    scores, labels = np.array(data[0]), np.array(data[1])
    transformed = np.exp(3 * scores) - 7
    assert roc_auc(transformed, labels) == pytest.approx(roc_auc(scores, labels), abs=1e-12)
    assert average_precision(transformed, labels) == pytest.approx(average_precision(scores, labels), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(scores_and_labels)
def test_values_in_unit_interval_and_order_free(data):
    scores, labels = np.array(data[0]), np.array(data[1])
    auc, ap = roc_auc(scores, labels), average_precision(scores, labels)
    assert 0 <= auc <= 1 and 0 <= ap <= 1
    perm = np.random.default_rng(len(scores)).permutation(len(scores))
    assert roc_auc(scores[perm], labels[perm]) == pytest.approx(auc, abs=1e-12)
    assert average_precision(scores[perm], labels[perm]) == pytest.approx(ap, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(scores_and_labels)
def test_reversed_scores_flip_auc(data):
    scores, labels = np.array(data[0]), np.array(data[1])
    assert roc_auc(-scores, labels) == pytest.approx(1 - roc_auc(scores, labels), abs=1e-12)


# ---------------------------------------------------------------------------
# instances
# ---------------------------------------------------------------------------

def test_group_instances_example():
    inst = group_instances([0, 0, 1, 1, 0], [0.1, 0.2, 0.8, 0.6, 0.3])
    assert [(i.label, i.start, i.end) for i in inst] == [(0, 0, 1), (1, 2, 3), (0, 4, 4)]
    np.testing.assert_allclose([i.mean_prob for i in inst], [0.15, 0.7, 0.3], rtol=1e-15)
    assert inst[1].duration == 2


def test_group_instances_degenerate():
    assert len(group_instances([1] * 6, np.linspace(0, 1, 6))) == 1
    assert [i.label for i in group_instances([0, 1, 0, 1], [0.1] * 4)] == [0, 1, 0, 1]
    with pytest.raises(DimensionError):
        group_instances([], [])
    with pytest.raises(DimensionError):
        group_instances([0, 1], [0.5])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=1, max_size=80))
def test_instances_partition_sequence(labels):
    probs = np.linspace(0, 1, len(labels))
    inst = group_instances(labels, probs)
    assert inst[0].start == 0 and inst[-1].end == len(labels) - 1
    for a, b in zip(inst, inst[1:]):
        assert b.start == a.end + 1 and a.label != b.label
    assert sum(i.duration for i in inst) == len(labels)
    for i in inst:
        assert all(labels[t] == i.label for t in range(i.start, i.end + 1))


# ---------------------------------------------------------------------------
# stratified evaluation
# ---------------------------------------------------------------------------

def test_single_video_example_is_short():
    rep = stratified_eval([0, 0, 1, 1, 0], [0.1, 0.2, 0.8, 0.6, 0.3], sample_rate=5)
    assert rep.short.n_instances == 1 and rep.short.n_positive == 2
    assert rep.long.auc is None and rep.long.ap is None and rep.long.n_instances == 0
    assert rep.frame_auc == roc_auc([0.1, 0.2, 0.8, 0.6, 0.3], [0, 0, 1, 1, 0])
    assert rep.boundary_frames == 15


def test_strata_split_by_duration():
    rng = np.random.default_rng(0)
    labels = np.zeros(200, dtype=int)
    labels[10:24] = 1  # 14 frames, short
    labels[50:65] = 1  # 15 frames, long
    labels[100:140] = 1  # long
    probs = rng.random(200)
    rep = stratified_eval(labels, probs, sample_rate=5)
    assert (rep.short.n_instances, rep.long.n_instances) == (1, 2)
    assert rep.short.n_positive == 14 and rep.long.n_positive == 55
    normal = labels == 0
    short_keep = normal.copy()
    short_keep[10:24] = True
    assert rep.short.auc == roc_auc(probs[short_keep], labels[short_keep])
    assert rep.short.n_frames == int(short_keep.sum())
    assert rep.n_instances == 7 and rep.n_error_instances == 3


def test_pooling_over_videos():
    rng = np.random.default_rng(1)
    videos = [(rng.integers(0, 2, n), rng.random(n)) for n in (30, 45, 12)]
    rep = stratified_eval([v[0] for v in videos], [v[1] for v in videos])
    y = np.concatenate([v[0] for v in videos])
    p = np.concatenate([v[1] for v in videos])
    assert rep.frame_auc == pytest.approx(roc_auc(p, y), abs=1e-15)
    assert rep.frame_ap == pytest.approx(average_precision(p, y), abs=1e-15)
    # instances never merge across a video boundary
    per_video = sum(len(group_instances(*v)) for v in videos)
    assert rep.n_instances == per_video


def test_pooling_order_irrelevant():
    rng = np.random.default_rng(2)
    videos = [(rng.integers(0, 2, n), rng.random(n)) for n in (20, 25, 30)]
    a = stratified_eval([v[0] for v in videos], [v[1] for v in videos])
    b = stratified_eval([v[0] for v in videos[::-1]], [v[1] for v in videos[::-1]])
    for key in ("frame_auc", "frame_ap", "instance_auc", "instance_ap"):
        assert getattr(a, key) == pytest.approx(getattr(b, key), abs=1e-12)


def test_report_json_renders_undefined_as_null(tmp_path):
    rep = stratified_eval([0, 0, 1, 1, 0], [0.1, 0.2, 0.8, 0.6, 0.3], metadata={"run": "x"})
    rep.save(tmp_path / "m.json")
    d = json.loads((tmp_path / "m.json").read_text())
    assert d["long"]["auc"] is None and d["long"]["ap"] is None
    assert d["metadata"] == {"run": "x"}
    for key in ("frame_auc", "frame_ap", "instance_auc", "instance_ap"):
        assert 0 <= d[key] <= 1


def test_curve_csv(tmp_path):
    write_curve_csv(tmp_path / "c.csv", [0.25, 0.75], [0, 1])
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines == ["frame_index,probability,label", "0,0.25,0", "1,0.75,1"]


def test_error_instance_duration():
    assert ErrorInstance(1, 3, 3, 0.5).duration == 1
