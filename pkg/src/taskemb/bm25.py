"""Okapi BM25 scoring and hard-negative mining over an in-memory corpus."""

from __future__ import annotations

import math
from collections import Counter
from typing import Sequence

import numpy as np

from .data import DataError, TupleRecord
from .tokenizer import words_of


class Bm25Index:
    """Precomputed document frequencies, term counts, and length statistics."""

    def __init__(self, docs: Sequence[str], k1: float = 1.2, b: float = 0.75):
        if not docs:
            raise DataError("BM25 index needs a non-empty corpus")
        self.docs = list(docs)
        self.k1 = k1
        self.b = b
        self._tf = [Counter(words_of(d)) for d in self.docs]
        self._len = [sum(tf.values()) for tf in self._tf]
        self.avgdl = sum(self._len) / len(self.docs)
        self.df: Counter = Counter()
        for tf in self._tf:
            self.df.update(tf.keys())
        self.n_docs = len(self.docs)

    def idf(self, term: str) -> float:
        df = self.df.get(term, 0)
        return math.log((self.n_docs - df + 0.5) / (df + 0.5) + 1.0)

    def score(self, query, doc_index: int) -> float:
        """BM25 score of one document against the query (terms keep multiplicity)."""
        terms = words_of(query) if isinstance(query, str) else list(query)
        tf = self._tf[doc_index]
        dl = self._len[doc_index]
        norm = self.k1 * (1.0 - self.b + self.b * dl / self.avgdl)
        total = 0.0
        for t in terms:
            f = tf.get(t, 0)
            if f == 0:
                continue
            total += self.idf(t) * f * (self.k1 + 1.0) / (f + norm)
        return total

    def rank(self, query, exclude: set[int] | frozenset = frozenset()) -> list[tuple[int, float]]:
        """All non-excluded documents sorted by (score desc, index asc)."""
        scored = [(i, self.score(query, i)) for i in range(self.n_docs) if i not in exclude]
        scored.sort(key=lambda pair: (-pair[1], pair[0]))
        return scored


def bm25_score(query, doc: str, index: Bm25Index) -> float:
    """Score an arbitrary document text against the index's corpus statistics."""
    terms = words_of(query) if isinstance(query, str) else list(query)
    tf = Counter(words_of(doc))
    dl = sum(tf.values())
    norm = index.k1 * (1.0 - index.b + index.b * dl / index.avgdl)
    total = 0.0
    for t in terms:
        f = tf.get(t, 0)
        if f == 0:
            continue
        total += index.idf(t) * f * (index.k1 + 1.0) / (f + norm)
    return total


def mine_hard_negatives(
    query: str,
    positive: str,
    corpus: Sequence[str],
    m: int,
    rng: np.random.Generator,
    index: Bm25Index | None = None,
) -> TupleRecord:
    """Top-m BM25 hits as negatives, excluding the positive and its duplicates.

    When fewer than m candidates score above zero, the remainder is filled
    with uniformly random corpus documents.  Raises when the corpus cannot
    supply m distinct eligible documents.
    """
    if m < 0:
        raise ValueError("m must be non-negative")
    index = index or Bm25Index(corpus)
    if list(index.docs) != list(corpus):
        raise ValueError("index does not match the given corpus")
    excluded = {i for i, d in enumerate(corpus) if d == positive}
    eligible = index.n_docs - len(excluded)
    if eligible < m:
        raise DataError(f"corpus has only {eligible} eligible documents, need {m}")

    negs: list[int] = []
    for i, score in index.rank(query, exclude=excluded):
        if len(negs) == m:
            break
        if score > 0.0:
            negs.append(i)
        else:
            break  # ranked list is sorted; the rest score <= 0
    if len(negs) < m:
        remaining = [i for i in range(index.n_docs) if i not in excluded and i not in set(negs)]
        fill = rng.choice(len(remaining), size=m - len(negs), replace=False)
        negs += [remaining[int(i)] for i in fill]
    return TupleRecord(query, positive, tuple(corpus[i] for i in negs), "mined")
