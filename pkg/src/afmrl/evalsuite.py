"""Retrieval metrics, linear probing and k-means clustering scores."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .corpus import ConfigError


def _check_positives(positives) -> set:
    pos = set(positives)
    if not pos:
        raise ConfigError("at least one positive is required")
    return pos


def rank_by_similarity(sims: np.ndarray, ids: Sequence[int]) -> list[int]:
    """Candidate ids by descending similarity, ties broken by ascending id."""
    ids = np.asarray(ids)
    order = np.lexsort((ids, -np.asarray(sims)))
    return [int(i) for i in ids[order]]


def recall_at_k(ranked: Sequence[int], positives, k: int) -> float:
    pos = _check_positives(positives)
    return len(pos.intersection(ranked[:k])) / len(pos)


def precision_at_k(ranked: Sequence[int], positives, k: int) -> float:
    pos = _check_positives(positives)
    return len(pos.intersection(ranked[:k])) / k


def ndcg_at_k(ranked: Sequence[int], positives, k: int) -> float:
    pos = _check_positives(positives)
    dcg = sum(1.0 / math.log2(r + 2) for r, c in enumerate(ranked[:k]) if c in pos)
    ideal = sum(1.0 / math.log2(r + 2) for r in range(min(k, len(pos))))
    return dcg / ideal


def average_precision_at_k(ranked: Sequence[int], positives, k: int) -> float:
    pos = _check_positives(positives)
    hits = 0
    total = 0.0
    for r, c in enumerate(ranked[:k], start=1):
        if c in pos:
            hits += 1
            total += hits / r
    return total / min(k, len(pos))


def map_at_k(rankings: Sequence[Sequence[int]], positives: Sequence, k: int) -> float:
    return float(np.mean([average_precision_at_k(r, p, k) for r, p in zip(rankings, positives)]))


METRICS: dict[str, Callable] = {
    "recall": recall_at_k,
    "precision": precision_at_k,
    "ndcg": ndcg_at_k,
    "map": average_precision_at_k,
}


@dataclass
class RetrievalResult:
    metric: str
    k: int
    value: float
    n_queries: int


def retrieval_scores(
    Eq: np.ndarray,
    Ec: np.ndarray,
    query_ids: Sequence[int],
    cand_ids: Sequence[int],
    relevant: Callable[[int, int], bool],
    metrics: Sequence[str],
    ks: Sequence[int],
    exclude_self: bool = True,
) -> list[RetrievalResult]:
    """Mean metric@k over queries; queries with no relevant candidate are skipped."""
    S = Eq @ Ec.T
    cand_ids = list(cand_ids)
    sums = {(m, k): 0.0 for m in metrics for k in ks}
    n = 0
    for qi, qid in enumerate(query_ids):
        keep = [j for j, c in enumerate(cand_ids) if not (exclude_self and c == qid)]
        ids = [cand_ids[j] for j in keep]
        pos = [c for c in ids if relevant(qid, c)]
        if not pos:
            continue
        ranked = rank_by_similarity(S[qi, keep], ids)
        for m in metrics:
            for k in ks:
                sums[(m, k)] += METRICS[m](ranked, pos, k)
        n += 1
    return [RetrievalResult(m, k, sums[(m, k)] / max(n, 1), n) for m in metrics for k in ks]


def linear_probe(
    emb: np.ndarray,
    labels: Sequence[int],
    train_idx: Sequence[int],
    test_idx: Sequence[int],
    epochs: int = 200,
    lr: float = 0.5,
    l2: float = 1e-4,
) -> float:
    """Softmax regression by full-batch gradient descent; returns test accuracy."""
    labels = np.asarray(labels)
    train_idx, test_idx = np.asarray(train_idx), np.asarray(test_idx)
    if set(train_idx.tolist()) & set(test_idx.tolist()):
        raise ConfigError("train and test splits overlap")
    classes = np.unique(labels[train_idx])
    if len(classes) < 2:
        raise ConfigError("linear probe needs at least two classes")
    cls_index = {c: i for i, c in enumerate(classes)}
    X = np.hstack([emb, np.ones((emb.shape[0], 1))])
    y = np.array([cls_index[c] for c in labels[train_idx]])
    Wt = np.zeros((X.shape[1], len(classes)))
    Y = np.eye(len(classes))[y]
    Xtr = X[train_idx]
    for _ in range(epochs):
        Z = Xtr @ Wt
        Z -= Z.max(axis=1, keepdims=True)
        P = np.exp(Z)
        P /= P.sum(axis=1, keepdims=True)
        Wt -= lr * (Xtr.T @ (P - Y) / len(y) + l2 * Wt)
    pred = classes[np.argmax(X[test_idx] @ Wt, axis=1)]
    return float(np.mean(pred == labels[test_idx]))


def kmeans(emb: np.ndarray, n_clusters: int, seed: int, max_iter: int = 300, tol: float = 1e-8) -> np.ndarray:
    """k-means++ seeding then Lloyd iterations; returns a cluster id per row."""
    X = np.asarray(emb, dtype=np.float64)
    n = X.shape[0]
    if not 1 <= n_clusters <= n:
        raise ConfigError(f"n_clusters={n_clusters} must lie in [1, {n}]")
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(n))]
    d2 = np.sum((X - X[chosen[0]]) ** 2, axis=1)
    for _ in range(1, n_clusters):
        total = d2.sum()
        if total <= 0:
            # every point already sits on a centre: take the lowest unused row
            idx = next(i for i in range(n) if i not in chosen)
        else:
            idx = int(rng.choice(n, p=d2 / total))
        chosen.append(idx)
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    C = X[chosen].copy()
    for _ in range(max_iter):
        dist = ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)
        assign = np.argmin(dist, axis=1)
        newC = C.copy()
        for c in range(n_clusters):
            members = X[assign == c]
            if len(members):
                newC[c] = members.mean(axis=0)
        shift = np.max(np.linalg.norm(newC - C, axis=1))
        C = newC
        if shift < tol:
            break
    dist = ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(dist, axis=1)


def contingency(assign: Sequence[int], truth: Sequence[int]) -> np.ndarray:
    _, a = np.unique(np.asarray(assign), return_inverse=True)
    _, t = np.unique(np.asarray(truth), return_inverse=True)
    table = np.zeros((a.max() + 1, t.max() + 1), dtype=np.int64)
    np.add.at(table, (a, t), 1)
    return table


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(assign, truth) -> float:
    """Mutual information normalised by the arithmetic mean of the two entropies."""
    table = contingency(assign, truth)
    n = table.sum()
    h_a = _entropy(table.sum(axis=1))
    h_t = _entropy(table.sum(axis=0))
    if h_a == 0.0 and h_t == 0.0:
        return 1.0
    nz = table > 0
    outer = np.outer(table.sum(axis=1), table.sum(axis=0))
    mi = float((table[nz] / n * np.log(table[nz] * n / outer[nz])).sum())
    denom = (h_a + h_t) / 2
    return mi / denom if denom > 0 else 0.0


def _comb2(x):
    return x * (x - 1) / 2.0


def ari(assign, truth) -> float:
    table = contingency(assign, truth)
    n = table.sum()
    sum_ij = _comb2(table).sum()
    sum_a = _comb2(table.sum(axis=1)).sum()
    sum_b = _comb2(table.sum(axis=0)).sum()
    expected = sum_a * sum_b / _comb2(n) if n > 1 else 0.0
    max_index = (sum_a + sum_b) / 2
    if max_index == expected:
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))


def purity(assign, truth) -> float:
    table = contingency(assign, truth)
    return float(table.max(axis=1).sum() / table.sum())
