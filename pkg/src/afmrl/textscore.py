"""BM25 lexical relevance between attribute token lists.

Uses the non-negative idf ``ln(1 + (N - df + 0.5) / (df + 0.5))`` so every score
is >= 0. Tokens are whole ``key=value`` strings.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import ConfigError


@dataclass(frozen=True)
class Bm25Index:
    n_docs: int
    doc_freq: dict[str, int]
    avg_doc_len: float
    k1: float = 1.2
    b: float = 0.75

    def idf(self, token: str) -> float:
        df = self.doc_freq.get(token, 0)
        return math.log(1.0 + (self.n_docs - df + 0.5) / (df + 0.5))


def build_index(docs: Sequence[Sequence[str]], k1: float = 1.2, b: float = 0.75) -> Bm25Index:
    if not docs:
        raise ConfigError("BM25 corpus must contain at least one document")
    if k1 <= 0 or not 0.0 <= b <= 1.0:
        raise ConfigError(f"invalid BM25 parameters k1={k1}, b={b}")
    df: Counter[str] = Counter()
    total = 0
    for doc in docs:
        df.update(set(doc))
        total += len(doc)
    if total == 0:
        raise ConfigError("BM25 corpus has no tokens")
    return Bm25Index(len(docs), dict(df), total / len(docs), k1, b)


def bm25_score(index: Bm25Index, query_tokens: Sequence[str], doc_tokens: Sequence[str]) -> float:
    tf = Counter(doc_tokens)
    norm = index.k1 * (1.0 - index.b + index.b * len(doc_tokens) / index.avg_doc_len)
    score = 0.0
    for t in query_tokens:
        f = tf.get(t, 0)
        if f:
            score += index.idf(t) * f * (index.k1 + 1.0) / (f + norm)
    return score


def bm25_matrix(
    index: Bm25Index,
    queries: Sequence[Sequence[str]],
    candidates: Sequence[Sequence[str]],
) -> np.ndarray:
    """``B[i, j] = bm25_score(index, queries[i], candidates[j])``, vectorised."""
    vocab: dict[str, int] = {}
    for doc in list(queries) + list(candidates):
        for t in doc:
            vocab.setdefault(t, len(vocab))
    nq, nc, v = len(queries), len(candidates), len(vocab)
    if v == 0:
        return np.zeros((nq, nc))
    Q = np.zeros((nq, v))
    D = np.zeros((nc, v))
    for i, doc in enumerate(queries):
        for t in doc:
            Q[i, vocab[t]] += 1.0
    for j, doc in enumerate(candidates):
        for t in doc:
            D[j, vocab[t]] += 1.0
    idf = np.array([index.idf(t) for t in vocab])
    lengths = D.sum(axis=1)
    norm = index.k1 * (1.0 - index.b + index.b * lengths / index.avg_doc_len)
    tf_part = D * (index.k1 + 1.0) / (D + norm[:, None])
    return (Q * idf) @ tf_part.T


def dump_matrix_csv(matrix: np.ndarray, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        for row in np.atleast_2d(matrix):
            w.writerow([repr(float(x)) for x in row])
