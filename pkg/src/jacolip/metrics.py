"""Similarity matrices, ranking-fairness metrics and utility metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .linalg import as_csr


@dataclass(frozen=True)
class SimilarityMatrix:
    values: np.ndarray
    kind: str  # "feature-cosine" | "structural-jaccard" | "outcome-cosine"


def cosine_similarity(m, kind: str = "feature-cosine") -> SimilarityMatrix:
    m = np.asarray(m, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", m, m))
    safe = np.where(norms > 0, norms, 1.0)
    unit = m / safe[:, None]
    s = unit @ unit.T
    s = np.clip((s + s.T) / 2.0, -1.0, 1.0)
    zero = norms == 0
    s[zero, :] = 0.0
    s[:, zero] = 0.0
    np.fill_diagonal(s, 1.0)
    return SimilarityMatrix(s, kind)


def jaccard_similarity(a) -> SimilarityMatrix:
    """|N(i) & N(j)| / |N(i) | N(j)|, 0 when both neighbourhoods are empty."""
    a = as_csr(a)
    a.data[:] = 1.0
    inter = np.asarray((a @ a.T).todense(), dtype=np.float64)
    deg = np.asarray(a.sum(axis=1)).ravel()
    union = deg[:, None] + deg[None, :] - inter
    s = np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
    return SimilarityMatrix(s, "structural-jaccard")


def _values(s):
    return s.values if isinstance(s, SimilarityMatrix) else np.asarray(s, dtype=np.float64)


# ----------------------------------------------------------------- ranking


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Per row, indices of the k largest scores, descending; ties -> lower index."""
    n, m = scores.shape
    kth = np.partition(scores, m - k, axis=1)[:, m - k]
    greater = scores > kth[:, None]
    equal = scores == kth[:, None]
    need = k - greater.sum(axis=1)
    chosen = greater | (equal & (np.cumsum(equal, axis=1) <= need[:, None]))
    cols = np.nonzero(chosen)[1].reshape(n, k)
    vals = np.take_along_axis(scores, cols, axis=1)
    order = np.argsort(-vals, axis=1, kind="stable")
    return np.take_along_axis(cols, order, axis=1)


def _ranking(s_y: np.ndarray, k: int) -> np.ndarray:
    scores = s_y.copy()
    np.fill_diagonal(scores, -np.inf)
    return top_k(scores, k)


def _relevance(s_g: np.ndarray) -> np.ndarray:
    # gains assume relevance in [0, 1]; negative cosine counts as irrelevant
    rel = np.clip(s_g, 0.0, 1.0)
    return rel


def _ideal_relevance(rel: np.ndarray, k: int) -> np.ndarray:
    masked = rel.copy()
    np.fill_diagonal(masked, -np.inf)
    n = masked.shape[1]
    top = -np.sort(-np.partition(masked, n - k, axis=1)[:, n - k:], axis=1)
    return top


def _check(s_g, s_y, k):
    s_g, s_y = _values(s_g), _values(s_y)
    if s_g.shape != s_y.shape or s_g.ndim != 2 or s_g.shape[0] != s_g.shape[1]:
        raise ValueError("similarity matrices must be square and of equal shape")
    if k < 1:
        raise ValueError("k must be >= 1")
    if k >= s_g.shape[0]:
        raise ValueError(f"k={k} must be smaller than the node count {s_g.shape[0]}")
    return s_g, s_y


def _dcg(gains: np.ndarray) -> np.ndarray:
    total = np.zeros(gains.shape[0])
    for p in range(gains.shape[1]):
        total = total + gains[:, p] / np.log2(p + 2.0)
    return total


def _err(r: np.ndarray) -> np.ndarray:
    total = np.zeros(r.shape[0])
    stay = np.ones(r.shape[0])
    for p in range(r.shape[1]):
        total = total + stay * r[:, p] / (p + 1.0)
        stay = stay * (1.0 - r[:, p])
    return total


def ndcg_at_k(s_g, s_y, k: int = 10) -> np.ndarray:
    """Per-node NDCG@k of the S_Y ranking against S_G relevance (exponential gain)."""
    s_g, s_y = _check(s_g, s_y, k)
    rel = _relevance(s_g)
    ranked = np.take_along_axis(rel, _ranking(s_y, k), axis=1)
    dcg = _dcg(np.exp2(ranked) - 1.0)
    idcg = _dcg(np.exp2(_ideal_relevance(rel, k)) - 1.0)
    return np.where(idcg > 0, dcg / np.where(idcg > 0, idcg, 1.0), 1.0)


def err_at_k(s_g, s_y, k: int = 10) -> np.ndarray:
    """Per-node expected reciprocal rank @k, normalized by the ideal ordering."""
    s_g, s_y = _check(s_g, s_y, k)
    rel = _relevance(s_g)
    masked = rel.copy()
    np.fill_diagonal(masked, -np.inf)
    rel_max = masked.max(axis=1)
    denom = np.exp2(rel_max)[:, None]
    ranked = np.take_along_axis(rel, _ranking(s_y, k), axis=1)
    got = _err((np.exp2(ranked) - 1.0) / denom)
    ideal = _err((np.exp2(_ideal_relevance(rel, k)) - 1.0) / denom)
    return np.where(ideal > 0, got / np.where(ideal > 0, ideal, 1.0), 1.0)


@dataclass
class RankMetricReport:
    k: int
    ndcg: np.ndarray
    err: np.ndarray

    @property
    def mean_ndcg(self) -> float:
        return float(np.mean(self.ndcg))

    @property
    def mean_err(self) -> float:
        return float(np.mean(self.err))

    def write_per_node(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["node", f"ndcg@{self.k}", f"err@{self.k}"])
            for i, (a, b) in enumerate(zip(self.ndcg, self.err)):
                w.writerow([i, repr(float(a)), repr(float(b))])


def rank_metrics(s_g, s_y, k: int = 10) -> RankMetricReport:
    return RankMetricReport(k, ndcg_at_k(s_g, s_y, k), err_at_k(s_g, s_y, k))


# ----------------------------------------------------------------- utility


def accuracy(y, labels, mask=None) -> float:
    y = np.asarray(y)
    labels = np.asarray(labels)
    idx = np.arange(y.shape[0]) if mask is None else np.flatnonzero(np.asarray(mask, dtype=bool))
    if idx.size == 0:
        raise ValueError("accuracy mask selects no nodes")
    return float(np.mean(np.argmax(y[idx], axis=1) == labels[idx]))


def auc(scores, labels) -> float:
    """ROC AUC as P(s+ > s-) + P(s+ == s-)/2 via average ranks."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc needs both positive and negative examples")
    ranks = rankdata(scores, method="average")
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def similarity_for(kind: str, graph) -> SimilarityMatrix:
    """Oracle similarity S_G of a graph: ``"feature"`` or ``"structural"``."""
    if kind == "feature":
        return cosine_similarity(graph.features)
    if kind == "structural":
        return jaccard_similarity(graph.adjacency)
    raise ValueError(f"unknown similarity kind {kind!r}")


def outcome_similarity(outputs) -> SimilarityMatrix:
    return cosine_similarity(outputs, kind="outcome-cosine")


def metric_report(report: RankMetricReport, utility_name: str, utility_value: float,
                  per_node_path=None) -> dict:
    out = {
        f"ndcg@{report.k}": report.mean_ndcg,
        f"err@{report.k}": report.mean_err,
        utility_name: utility_value,
        "k": report.k,
    }
    if per_node_path is not None:
        out["per_node_path"] = str(per_node_path)
    return out
