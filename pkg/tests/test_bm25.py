"""BM25 scoring against the closed form and a brute-force ranking oracle."""

import math

import numpy as np
import pytest

from taskemb.bm25 import Bm25Index, bm25_score, mine_hard_negatives
from taskemb.data import DataError


def o_bm25(query_terms, doc_terms, corpus_term_lists, k1=1.2, b=0.75):
    """Direct-formula oracle, no shared code with the index."""
    n = len(corpus_term_lists)
    avg = sum(len(d) for d in corpus_term_lists) / n
    total = 0.0
    for t in query_terms:
        df = sum(1 for d in corpus_term_lists if t in d)
        idf = math.log((n - df + 0.5) / (df + 0.5) + 1.0)
        tf = doc_terms.count(t)
        if tf == 0:
            continue
        total += idf * tf * (k1 + 1.0) / (tf + k1 * (1 - b + b * len(doc_terms) / avg))
    return total


def test_absent_term_contributes_zero():
    index = Bm25Index(["apple banana", "cherry date"])
    with_term = index.score("apple", 0)
    with_extra = index.score("apple missingterm", 0)
    assert with_term == pytest.approx(with_extra)


def test_single_doc_closed_form():
    # one 1-word doc, 1-word query, N=1: score = ln(4/3) * 2.2 / 2.2 = ln(4/3)
    index = Bm25Index(["apple"])
    assert index.score("apple", 0) == pytest.approx(math.log(4.0 / 3.0), abs=1e-12)


def test_scores_match_oracle_on_50_doc_corpus():
    rng = np.random.default_rng(11)
    vocab = [f"w{i}" for i in range(30)]
    docs = [" ".join(rng.choice(vocab, size=rng.integers(3, 12)).tolist()) for _ in range(50)]
    corpus_terms = [d.split() for d in docs]
    index = Bm25Index(docs)
    for trial in range(20):
        q_terms = rng.choice(vocab, size=3).tolist()
        query = " ".join(q_terms)
        got = [index.score(query, i) for i in range(50)]
        want = [o_bm25(q_terms, corpus_terms[i], corpus_terms) for i in range(50)]
        assert np.allclose(got, want, atol=1e-12)
        # ranking agrees with the brute-force oracle
        got_rank = [i for i, _ in index.rank(query)]
        want_rank = sorted(range(50), key=lambda i: (-want[i], i))
        assert got_rank == want_rank


def test_bm25_score_free_function_matches_index():
    docs = ["apple banana cherry", "banana banana", "cherry date"]
    index = Bm25Index(docs)
    for i, d in enumerate(docs):
        assert bm25_score("banana cherry", d, index) == pytest.approx(
            index.score("banana cherry", i))


def test_empty_corpus_errors():
    with pytest.raises(DataError):
        Bm25Index([])


# -- mining ------------------------------------------------------------------


def _corpus(rng, n=50):
    vocab = [f"t{i}" for i in range(40)]
    return [" ".join(rng.choice(vocab, size=6).tolist()) for _ in range(n)]


def test_mine_m0_is_plain_pair(rng):
    corpus = _corpus(rng)
    rec = mine_hard_negatives("t1 t2", corpus[0], corpus, 0, rng)
    assert rec.m == 0 and rec.q == "t1 t2" and rec.p == corpus[0]


def test_mine_excludes_positive_even_if_top_hit(rng):
    corpus = ["exact match words here", "match words", "unrelated stuff entirely",
              "more words match here"]
    rec = mine_hard_negatives("exact match words here", corpus[0], corpus, 2, rng)
    assert corpus[0] not in rec.negatives
    assert rec.m == 2


def test_mine_excludes_duplicates_of_positive(rng):
    corpus = ["same text", "same text", "other words", "different things"]
    rec = mine_hard_negatives("same text", "same text", corpus, 2, rng)
    assert "same text" not in rec.negatives


def test_mine_matches_bruteforce_topm(rng):
    corpus = _corpus(rng)
    index = Bm25Index(corpus)
    query, positive = "t1 t2 t3", corpus[7]
    rec = mine_hard_negatives(query, positive, corpus, 5, rng, index)
    scored = sorted(
        ((i, index.score(query, i)) for i, d in enumerate(corpus) if d != positive),
        key=lambda p: (-p[1], p[0]))
    want = [corpus[i] for i, s in scored[:5] if s > 0]
    assert list(rec.negatives[:len(want)]) == want


def test_mine_pads_with_random_docs_when_scores_zero(rng):
    corpus = ["aa bb", "cc dd", "ee ff", "gg hh", "ii jj"]
    rec = mine_hard_negatives("zz yy", corpus[0], corpus, 3, rng)
    assert rec.m == 3
    assert corpus[0] not in rec.negatives
    assert len(set(rec.negatives)) == 3  # padding samples without replacement


def test_mine_corpus_too_small_errors(rng):
    with pytest.raises(DataError):
        mine_hard_negatives("q", "pos", ["pos", "other"], 2, rng)
