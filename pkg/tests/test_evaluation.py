import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mafer.evaluation import (
    EvaluationError,
    RetrievalResult,
    average_accuracy,
    average_precision,
    cbir_from_features,
    confusion,
    extract_features,
    features_from_csv,
    features_to_csv,
    format_mean_sd,
    knn_classify,
    knn_leave_one_out,
    mean_average_precision,
    overall_accuracy,
    per_class_recall,
    precision_at_k,
    run_cbir,
    vote,
)
from mafer.nn import CnnModel, ModelConfig
from mafer.pipeline import InputSpec


def _result(rel):
    rel = np.asarray(rel)
    return RetrievalResult(0, np.arange(len(rel)), rel, int(rel.sum()))


# brute-force oracles written straight from the definitions ------------------------

def oracle_precision(rel, k):
    return sum(rel[:k]) / k


def oracle_ap(rel):
    hits, total = 0, 0.0
    for i, r in enumerate(rel, start=1):
        if r:
            hits += 1
            total += hits / i
    return total / hits


def oracle_knn(gallery, labels, q, k):
    d = sorted((math.dist(g, q), i) for i, g in enumerate(gallery))[:k]
    near = [labels[i] for _, i in d]
    best = max(near.count(l) for l in near)
    return next(l for l in near if near.count(l) == best)


# accuracy ------------------------------------------------------------------------

def test_accuracy_examples():
    assert overall_accuracy([0, 1, 1, 0], [0, 1, 0, 0]) == 0.75
    mean, sd = average_accuracy([0, 0, 1, 1], [0, 0, 0, 1])
    # recalls 2/3 and 1
    assert mean == pytest.approx(5 / 6) and sd == pytest.approx(1 / 6)
    with pytest.raises(EvaluationError, match="absent"):
        per_class_recall([0, 1], [0, 0], num_classes=2)
    with pytest.raises(EvaluationError):
        overall_accuracy([0], [0, 1])


def test_average_accuracy_differs_from_overall_on_imbalance():
    labels = [0] * 9 + [1]
    preds = [0] * 10
    assert overall_accuracy(preds, labels) == 0.9
    assert average_accuracy(preds, labels)[0] == 0.5


def test_confusion_matrix():
    cm = confusion([0, 1, 1, 2], [0, 1, 2, 2], 3, ["a", "b", "c"])
    assert cm.counts.tolist() == [[1, 0, 0], [0, 1, 0], [0, 1, 1]]
    assert cm.total == 4 and cm.accuracy() == 0.75
    assert np.allclose(cm.normalized()[2], [0, 0.5, 0.5])
    assert cm.to_csv().splitlines()[0] == "true\\pred,a,b,c"
    with pytest.raises(EvaluationError, match="out of range"):
        confusion([3], [0], 3)


def test_mean_sd_format():
    assert format_mean_sd(0.984, 0.0011) == "98.40 ± 0.11"


# k-NN ------------------------------------------------------------------------------

def test_vote_ties_go_to_nearest():
    assert vote([2, 1, 1]) == 1
    assert vote([2, 1, 0]) == 2
    assert vote([1, 2, 2, 1]) == 1


def test_knn_distance_tie_goes_to_lower_index():
    gallery = np.array([[1.0], [-1.0], [5.0]])
    assert knn_classify(gallery, [7, 8, 9], [0.0], k=1) == 7


def test_knn_k_too_large():
    with pytest.raises(EvaluationError, match="exceeds"):
        knn_classify(np.zeros((2, 1)), [0, 1], [0.0], k=3)


def test_knn_matches_brute_force_on_200_instances():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n, d = rng.integers(4, 15), rng.integers(1, 4)
        g = rng.integers(-2, 3, size=(n, d)).astype(float)  # small ints force ties
        y = rng.integers(0, 3, size=n).tolist()
        q = rng.integers(-2, 3, size=d).astype(float)
        k = int(rng.integers(1, min(n, 6)))
        assert knn_classify(g, y, q, k) == oracle_knn(g.tolist(), y, q.tolist(), k)


def test_leave_one_out_excludes_self():
    feats = np.array([[0.0], [0.1], [10.0], [10.1]])
    assert knn_leave_one_out(feats, [0, 0, 1, 1], k=1).tolist() == [0, 0, 1, 1]


# retrieval ---------------------------------------------------------------------------

def test_precision_and_ap_examples():
    r = _result([1, 0, 1])
    assert precision_at_k(r, 3) == pytest.approx(2 / 3)
    assert average_precision(r) == pytest.approx((1 + 2 / 3) / 2)
    assert average_precision(_result([0] * 4 + [1])) == pytest.approx(1 / 5)
    assert average_precision(_result([1, 1, 0, 0])) == 1.0
    with pytest.raises(EvaluationError):
        precision_at_k(r, 4)
    with pytest.raises(EvaluationError, match="no relevant"):
        average_precision(_result([0, 0]))


def test_map_skips_queries_without_relevant_items():
    assert mean_average_precision([_result([1, 0]), _result([0, 0]), _result([0, 1])]) == pytest.approx(0.75)


def test_metrics_match_brute_force_on_200_instances():
    rng = np.random.default_rng(1)
    for _ in range(200):
        n = int(rng.integers(1, 40))
        rel = rng.integers(0, 2, size=n)
        if rel.sum() == 0:
            rel[rng.integers(n)] = 1
        r = _result(rel)
        for k in range(1, n + 1):
            assert precision_at_k(r, k) == pytest.approx(oracle_precision(rel.tolist(), k))
        assert average_precision(r) == pytest.approx(oracle_ap(rel.tolist()))


@settings(max_examples=80, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=30).filter(any))
def test_ap_is_bounded_and_perfect_only_when_sorted(rel):
    ap = average_precision(_result([int(x) for x in rel]))
    assert 0 < ap <= 1
    first_miss = rel.index(False) if False in rel else len(rel)
    assert (ap == 1.0) == (not any(rel[first_miss:]))


def test_cbir_protocol_matches_brute_force():
    rng = np.random.default_rng(2)
    y = np.repeat(np.arange(3), 15)
    feats = rng.normal(size=(45, 4)) + y[:, None] * 1.5
    rep = cbir_from_features(feats, y, queries_per_class=5, ks=(1, 5, 10), seed=3)
    assert rep.num_queries == len(rep.queries) == 15
    preds = knn_leave_one_out(feats, y, 3)
    assert all(preds[q] == y[q] for q in rep.queries)
    gallery = [i for i in range(45) if i not in rep.queries]
    aps, p5 = [], []
    for q in rep.queries:
        ranked = sorted(gallery, key=lambda g: (math.dist(feats[q], feats[g]), g))
        rel = [int(y[g] == y[q]) for g in ranked]
        aps.append(oracle_ap(rel))
        p5.append(oracle_precision(rel, 5))
    assert rep.map[0] == pytest.approx(np.mean(aps))
    assert rep.map[1] == pytest.approx(np.std(aps))
    assert rep.precision[5][0] == pytest.approx(np.mean(p5))


def test_cbir_is_seeded():
    rng = np.random.default_rng(4)
    y = np.repeat(np.arange(2), 30)
    feats = rng.normal(size=(60, 3)) + y[:, None] * 3
    a = cbir_from_features(feats, y, 10, (1,), seed=1)
    assert a.queries == cbir_from_features(feats, y, 10, (1,), seed=1).queries
    assert a.queries != cbir_from_features(feats, y, 10, (1,), seed=2).queries


def test_one_hot_features_give_perfect_map():
    y = np.repeat(np.arange(6), 40)
    rep = cbir_from_features(np.eye(6)[y], y, queries_per_class=20, ks=(1, 5, 10, 50, 100), seed=0)
    assert rep.num_queries == 120
    assert rep.map[0] == 1.0
    assert rep.precision[10][0] == 1.0
    # 20 relevant items remain per class, so p@50 is capped at 20/50
    assert rep.precision[50][0] == pytest.approx(0.4)


def test_random_two_class_features_give_map_near_half():
    rng = np.random.default_rng(5)
    y = np.repeat([0, 1], 300)
    rep = cbir_from_features(rng.normal(size=(600, 8)), y, 20, (1,), seed=0, predictions=y)
    assert abs(rep.map[0] - 0.5) < 0.05


def test_cbir_errors():
    y = np.array([0, 0, 1, 1])
    with pytest.raises(EvaluationError, match="gallery"):
        cbir_from_features(np.eye(2)[y], y, 5, (1,), predictions=y)
    with pytest.raises(EvaluationError, match="exceed"):
        cbir_from_features(np.eye(2)[y], y, 1, (5,), predictions=y)


def test_feature_csv_round_trip():
    feats = np.random.default_rng(6).normal(size=(3, 4))
    ids, labels, back = features_from_csv(features_to_csv(feats, [0, 2, 1]))
    assert ids == ["0", "1", "2"] and labels.tolist() == [0, 2, 1]
    assert np.array_equal(back, feats)


def test_run_cbir_eligibility_views(small_synth):
    model = CnnModel.create(ModelConfig(in_channels=1, channels=(4,), embed_dim=6, num_classes=6), seed=0)
    spec = InputSpec(16, 1, (0.5,), (0.5,))
    feats, labels, _ = extract_features(model, small_synth, spec)
    assert feats.shape == (48, 6)
    native = run_cbir(model, small_synth, spec, queries_per_class=2, ks=(1, 5), query_resolution=None)
    ref = cbir_from_features(feats, labels, 2, (1, 5), seed=0)
    assert native.queries == ref.queries and native.map == ref.map
    with pytest.raises(EvaluationError, match="view"):
        run_cbir(model, small_synth, spec, eligibility_view="sideways")
