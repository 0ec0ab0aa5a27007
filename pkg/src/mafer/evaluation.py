"""Accuracy protocols, confusion matrices, feature export, k-NN and retrieval metrics."""
from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .pipeline import eval_inputs
from .rng import Xoshiro256pp

log = logging.getLogger(__name__)


class EvaluationError(ValueError):
    pass


# accuracy --------------------------------------------------------------------

def _pair(preds, labels) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=np.int64).ravel()
    y = np.asarray(labels, dtype=np.int64).ravel()
    if len(p) != len(y):
        raise EvaluationError(f"{len(p)} predictions for {len(y)} labels")
    if len(y) == 0:
        raise EvaluationError("cannot score an empty prediction set")
    return p, y


def overall_accuracy(preds, labels) -> float:
    p, y = _pair(preds, labels)
    return float(np.mean(p == y))


def per_class_recall(preds, labels, num_classes: int | None = None) -> np.ndarray:
    p, y = _pair(preds, labels)
    K = num_classes if num_classes is not None else int(max(p.max(), y.max())) + 1
    absent = [c for c in range(K) if not np.any(y == c)]
    if absent:
        raise EvaluationError(f"classes absent from labels: {absent}")
    return np.array([np.mean(p[y == c] == c) for c in range(K)])


def average_accuracy(preds, labels, num_classes: int | None = None) -> tuple[float, float]:
    """Mean of per-class recalls and their population standard deviation."""
    r = per_class_recall(preds, labels, num_classes)
    return float(r.mean()), float(r.std())


@dataclass
class ConfusionMatrix:
    counts: np.ndarray
    class_names: list[str] = field(default_factory=list)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.counts.sum())

    def normalized(self) -> np.ndarray:
        rows = self.counts.sum(axis=1, keepdims=True).astype(np.float64)
        return np.divide(self.counts, rows, out=np.zeros(self.counts.shape), where=rows > 0)

    def to_csv(self) -> str:
        names = self.class_names or [str(c) for c in range(len(self.counts))]
        buf = io.StringIO()
        buf.write("true\\pred," + ",".join(names) + "\n")
        for name, row in zip(names, self.counts):
            buf.write(name + "," + ",".join(str(int(v)) for v in row) + "\n")
        return buf.getvalue()


def confusion(preds, labels, num_classes: int, class_names: Sequence[str] = ()) -> ConfusionMatrix:
    """Rows are true classes, columns predictions."""
    p, y = _pair(preds, labels)
    bad = (p < 0) | (p >= num_classes) | (y < 0) | (y >= num_classes)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise EvaluationError(f"sample {i}: class id out of range [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (y, p), 1)
    return ConfusionMatrix(counts, list(class_names))


def mean_sd(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std())


def format_mean_sd(mean: float, sd: float) -> str:
    """Percent with two decimals, e.g. ``98.40 ± 0.11``."""
    return f"{100 * mean:.2f} ± {100 * sd:.2f}"


# nearest neighbours --------------------------------------------------------------

def pairwise_distances(a: np.ndarray, b: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Exact euclidean distances (difference-then-square, float64)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.empty((len(a), len(b)))
    for i in range(0, len(a), chunk):
        d = a[i:i + chunk, None, :] - b[None, :, :]
        out[i:i + chunk] = np.sqrt(np.einsum("ijk,ijk->ij", d, d))
    return out


def rank_by_distance(dist_row: np.ndarray) -> np.ndarray:
    """Ascending distance; ties go to the lower gallery index."""
    return np.argsort(dist_row, kind="stable")


def vote(neighbor_labels: Sequence[int]) -> int:
    """Majority label; a tied vote goes to whichever tied label appears nearest."""
    labels = [int(x) for x in neighbor_labels]
    counts: dict[int, int] = {}
    for lab in labels:
        counts[lab] = counts.get(lab, 0) + 1
    top = max(counts.values())
    tied = {lab for lab, n in counts.items() if n == top}
    for lab in labels:
        if lab in tied:
            return lab
    raise AssertionError("unreachable")


def knn_classify(gallery_features, gallery_labels, query, k: int = 3) -> int:
    g = np.asarray(gallery_features, dtype=np.float64)
    if k > len(g):
        raise EvaluationError(f"k={k} exceeds gallery size {len(g)}")
    if k < 1:
        raise EvaluationError("k must be >= 1")
    d = pairwise_distances(np.asarray(query, dtype=np.float64)[None, :], g)[0]
    order = rank_by_distance(d)[:k]
    return vote(np.asarray(gallery_labels)[order])


def knn_leave_one_out(features, labels, k: int = 3, query_features=None) -> np.ndarray:
    """Predict every sample from all the others. ``query_features`` (same rows) may replace the query view."""
    g = np.asarray(features, dtype=np.float64)
    q = g if query_features is None else np.asarray(query_features, dtype=np.float64)
    y = np.asarray(labels)
    if k > len(g) - 1:
        raise EvaluationError(f"k={k} exceeds gallery size {len(g) - 1}")
    d = pairwise_distances(q, g)
    preds = np.empty(len(g), dtype=np.int64)
    for i in range(len(g)):
        order = rank_by_distance(d[i])
        order = order[order != i][:k]
        preds[i] = vote(y[order])
    return preds


# retrieval -----------------------------------------------------------------------

@dataclass
class RetrievalResult:
    query: int
    ranking: np.ndarray
    rel: np.ndarray
    gtp: int

    @classmethod
    def from_distances(cls, query: int, dists: np.ndarray, gallery_labels: np.ndarray, query_label: int,
                       gallery_ids: np.ndarray | None = None) -> "RetrievalResult":
        order = rank_by_distance(dists)
        rel = (np.asarray(gallery_labels)[order] == query_label).astype(np.int64)
        ids = order if gallery_ids is None else np.asarray(gallery_ids)[order]
        return cls(query, ids, rel, int(rel.sum()))

    @property
    def precisions(self) -> np.ndarray:
        """p@i for i = 1..n."""
        return np.cumsum(self.rel) / np.arange(1, len(self.rel) + 1)


def precision_at_k(result: RetrievalResult, k: int) -> float:
    if k < 1:
        raise EvaluationError("k must be >= 1")
    if k > len(result.rel):
        raise EvaluationError(f"k={k} exceeds gallery size {len(result.rel)}")
    return float(result.rel[:k].sum() / k)


def average_precision(result: RetrievalResult) -> float:
    if result.gtp < 1:
        raise EvaluationError(f"query {result.query} has no relevant gallery item")
    return float((result.precisions * result.rel).sum() / result.gtp)


def mean_average_precision(results: Sequence[RetrievalResult]) -> float:
    """Mean AP over queries; queries without relevant items are skipped and logged."""
    aps = []
    for r in results:
        if r.gtp == 0:
            log.warning("query %s has no relevant gallery item; excluded from mAP", r.query)
            continue
        aps.append(average_precision(r))
    if not aps:
        raise EvaluationError("no scorable queries")
    return float(np.mean(aps))


@dataclass
class CbirReport:
    precision: dict[int, tuple[float, float]]
    map: tuple[float, float]
    num_queries: int
    queries_per_class: dict[int, int]
    excluded_queries: int = 0
    queries: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "num_queries": self.num_queries,
            "queries": self.queries,
            "queries_per_class": {str(c): n for c, n in self.queries_per_class.items()},
            "excluded_queries": self.excluded_queries,
            "spread": "population standard deviation over queries",
            "precision_at_k": {str(k): {"mean": m, "sd": s} for k, (m, s) in self.precision.items()},
            "precision_at_k_percent": {str(k): round(100 * m, 1) for k, (m, _) in self.precision.items()},
            "map": {"mean": self.map[0], "sd": self.map[1]},
            "map_percent": round(100 * self.map[0], 1),
        }


def cbir_from_features(features, labels, queries_per_class: int = 20, ks: Sequence[int] = (1, 5, 10, 50, 100),
                       seed: int = 0, knn_k: int = 3, query_features=None, predictions=None) -> CbirReport:
    """Retrieval protocol over precomputed features.

    Queries are drawn per class among correctly classified samples (3-NN
    leave-one-out unless ``predictions`` is given); the gallery is every
    non-query sample. ``query_features`` gives the query view of each row,
    e.g. features of a degraded copy.
    """
    feats = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    qfeats = feats if query_features is None else np.asarray(query_features, dtype=np.float64)
    if predictions is None:
        predictions = knn_leave_one_out(feats, y, knn_k, query_features=qfeats)
    predictions = np.asarray(predictions)
    rng = Xoshiro256pp.derive(seed, "cbir")
    queries: list[int] = []
    per_class = {}
    for c in range(int(y.max()) + 1):
        members = np.flatnonzero(y == c)
        if len(members) == 0:
            continue
        correct = [int(i) for i in members if predictions[i] == c]
        if not correct:
            raise EvaluationError(f"class {c} has no correctly classified sample to use as a query")
        if len(correct) <= queries_per_class:
            log.warning("class %d: only %d correctly classified samples, using all as queries", c, len(correct))
            chosen = correct
        else:
            rng.shuffle(correct)
            chosen = sorted(correct[:queries_per_class])
        per_class[c] = len(chosen)
        queries.extend(chosen)
    is_query = np.zeros(len(y), dtype=bool)
    is_query[queries] = True
    gallery = np.flatnonzero(~is_query)
    if len(gallery) == 0:
        raise EvaluationError("no gallery items left after choosing queries")
    bad_k = [k for k in ks if k < 1 or k > len(gallery)]
    if bad_k:
        raise EvaluationError(f"k values {bad_k} exceed gallery size {len(gallery)}")
    dists = pairwise_distances(qfeats[queries], feats[gallery])
    precs = {k: [] for k in ks}
    aps = []
    excluded = 0
    for qi, q in enumerate(queries):
        res = RetrievalResult.from_distances(q, dists[qi], y[gallery], int(y[q]), gallery)
        for k in ks:
            precs[k].append(precision_at_k(res, k))
        if res.gtp == 0:
            excluded += 1
            log.warning("query %d has no relevant gallery item; excluded from mAP", q)
            continue
        aps.append(average_precision(res))
    if not aps:
        raise EvaluationError("no scorable queries")
    return CbirReport({k: mean_sd(v) for k, v in precs.items()}, mean_sd(aps), len(queries), per_class, excluded,
                      [int(q) for q in queries])


def features_to_csv(features, labels, sample_ids=None) -> str:
    feats = np.asarray(features)
    ids = range(len(feats)) if sample_ids is None else sample_ids
    buf = io.StringIO()
    buf.write("sample_id,label," + ",".join(f"f{j}" for j in range(feats.shape[1])) + "\n")
    for sid, lab, row in zip(ids, labels, feats):
        buf.write(f"{sid},{int(lab)}," + ",".join(repr(float(v)) for v in row) + "\n")
    return buf.getvalue()


def features_from_csv(text: str) -> tuple[list[str], np.ndarray, np.ndarray]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    header = lines[0].split(",")
    if header[:2] != ["sample_id", "label"]:
        raise EvaluationError("feature CSV must start with 'sample_id,label'")
    ids, labels, rows = [], [], []
    for ln in lines[1:]:
        parts = ln.split(",")
        ids.append(parts[0])
        labels.append(int(parts[1]))
        rows.append([float(v) for v in parts[2:]])
    return ids, np.array(labels, dtype=np.int64), np.array(rows, dtype=np.float64)


# model-level protocols -----------------------------------------------------------

def extract_features(model, ds, spec, batch_size: int = 64, resolution: int | None = None):
    """Augmentation-free features in dataset order. Returns (N x D features, labels, logits)."""
    feats, logits = [], []
    for i in range(0, len(ds), batch_size):
        x = eval_inputs(ds, range(i, min(i + batch_size, len(ds))), spec, resolution)
        lo, fe = model.predict(x, batch_size)
        feats.append(fe)
        logits.append(lo)
    return np.concatenate(feats), ds.labels, np.concatenate(logits)


def run_cbir(model, ds, spec, queries_per_class: int = 20, ks: Sequence[int] = (1, 5, 10, 50, 100),
             seed: int = 0, knn_k: int = 3, query_resolution: int | None = None,
             eligibility: str = "knn", batch_size: int = 64, eligibility_view: str = "native") -> CbirReport:
    """Retrieval protocol on model features; queries optionally degraded to ``query_resolution``.

    ``eligibility_view`` picks which features decide "correctly classified":
    the native ones (default) or the degraded query ones.
    """
    if eligibility_view not in ("native", "query"):
        raise EvaluationError(f"unknown eligibility view {eligibility_view!r}")
    feats, labels, logits = extract_features(model, ds, spec, batch_size)
    qfeats, qlogits = feats, logits
    if query_resolution is not None:
        qfeats, _, qlogits = extract_features(model, ds, spec, batch_size, query_resolution)
    view_feats, view_logits = (feats, logits) if eligibility_view == "native" else (qfeats, qlogits)
    if eligibility == "classifier":
        preds = view_logits.argmax(axis=1)
    else:
        preds = knn_leave_one_out(feats, labels, knn_k, query_features=view_feats)
    return cbir_from_features(feats, labels, queries_per_class, ks, seed, knn_k,
                              query_features=qfeats, predictions=preds)


@dataclass
class KfoldResult:
    fold_accuracies: list[float]
    mean: float
    sd: float
    folds: list[list[int]]

    def to_dict(self) -> dict:
        return {
            "k": len(self.fold_accuracies),
            "fold_accuracies": self.fold_accuracies,
            "mean": self.mean,
            "sd": self.sd,
            "summary": format_mean_sd(self.mean, self.sd),
            "fold_sizes": [len(f) for f in self.folds],
            "fold_test_indices": self.folds,
        }
