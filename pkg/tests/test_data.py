"""Tokenizer, masking statistics, the pair overlap filter, batch sampling,
tuple construction, and quality-thread conversion."""

import collections
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from taskemb.data import (BatchSampler, DataError, LabeledRecord, PairRecord,
                          QualityThread, ScoredPairRecord, TupleRecord,
                          append_unique_id, build_class_tuples,
                          convert_quality_threads, load_labeled, load_pairs,
                          load_scored_pairs, load_threads, load_tuples,
                          overlap_filter, write_jsonl)
from taskemb.tokenizer import build_vocab, whole_word_mask

WORDS = st.text(alphabet="abcdefg", min_size=1, max_size=6)


# -- tokenizer -----------------------------------------------------------


def test_tokenize_empty_is_empty():
    v = build_vocab(["some words"], max_size=16)
    assert v.tokenize("") == []


def test_tokenize_case_folds():
    v = build_vocab(["apple"], max_size=16)
    ids = v.tokenize("Apple apple APPLE")
    assert len(set(ids)) == 1 and ids[0] != v.unk_id


def test_tokenize_unknown_maps_to_unk():
    v = build_vocab(["known"], max_size=16)
    assert v.tokenize("unknownword") == [v.unk_id]


@settings(max_examples=60, deadline=None)
@given(st.lists(WORDS, min_size=1, max_size=8))
def test_tokenize_roundtrip_in_vocab(words):
    text = " ".join(words)
    v = build_vocab([text], max_size=64)
    assert v.detokenize(v.tokenize(text)) == text.lower()


def test_vocab_frequency_cutoff():
    texts = ["a a a b b c"]
    v = build_vocab(texts, max_size=5)  # 3 specials + 2 slots
    assert "a" in v.index and "b" in v.index and "c" not in v.index


def test_vocab_extra_tokens_reserved():
    v = build_vocab(["common words"], max_size=16, extra=("query:", "uid0"))
    assert v.index["query:"] == 3 and v.index["uid0"] == 4


def test_vocab_roundtrip_json():
    v = build_vocab(["x y z"], max_size=16, extra=("query:",))
    from taskemb.tokenizer import Vocab
    again = Vocab.from_json(v.to_json())
    assert again.words == v.words


# -- whole-word masking ----------------------------------------------------


def test_mask_ratio_zero_no_change(rng):
    v = build_vocab(["a b c d e"], max_size=16)
    ids = v.tokenize("a b c d e")
    corrupted, targets, sel = whole_word_mask(ids, 0.0, rng, v)
    assert corrupted == ids and targets == ids and not any(sel)


def test_mask_ratio_one_selects_everything(rng):
    v = build_vocab(["a b c d e"], max_size=16)
    ids = v.tokenize("a b c d e")
    _, _, sel = whole_word_mask(ids, 1.0, rng, v)
    assert all(sel)


def test_mask_selection_fraction_statistics():
    v = build_vocab(["w" + str(i) for i in range(20)], max_size=64)
    rng = np.random.default_rng(42)
    ids = [3] * 10_000
    _, _, sel = whole_word_mask(ids, 0.15, rng, v)
    frac = sum(sel) / len(sel)
    assert 0.13 <= frac <= 0.17


def test_mask_corruption_split():
    v = build_vocab([" ".join(f"w{i}" for i in range(30))], max_size=64)
    rng = np.random.default_rng(7)
    ids = [5] * 30_000
    corrupted, targets, sel = whole_word_mask(ids, 1.0, rng, v)
    n = len(ids)
    masked = sum(1 for c in corrupted if c == v.mask_id)
    unchanged = sum(1 for c, t in zip(corrupted, targets) if c == t)
    random_sub = n - masked - unchanged
    assert abs(masked / n - 0.8) < 0.02
    assert abs(unchanged / n - 0.1) < 0.02
    assert abs(random_sub / n - 0.1) < 0.02


def test_mask_targets_preserved(rng):
    v = build_vocab(["a b c d"], max_size=16)
    ids = v.tokenize("a b c d a b")
    _, targets, _ = whole_word_mask(ids, 0.5, rng, v)
    assert targets == ids


# -- overlap filter -----------------------------------------------------------


def test_filter_disjoint_keeps():
    assert overlap_filter(PairRecord("aaa bbb ccc", "xxx yyy zzz www vvv"))


def test_filter_three_word_floor_keeps():
    # all 3 shorter-text words contained, but floor of 4 keeps the pair
    assert overlap_filter(PairRecord("red green blue",
                                     "red green blue and many other colors"))


def test_filter_five_words_four_matches_drops():
    # shorter text of 5 words, 4 substrings: 4 >= max(ceil(4), 4) -> drop
    pair = PairRecord("one two three four unseen",
                      "contains one two three four inside a longer text")
    assert not overlap_filter(pair)


def test_filter_substring_containment_not_word_match():
    # 'cat' occurs inside 'catalog': containment counts it
    pair = PairRecord("cat dog bird fish", "catalog dogma birdhouse fishing boats here")
    assert not overlap_filter(pair)


@settings(max_examples=60, deadline=None)
@given(st.lists(WORDS, min_size=1, max_size=6), st.lists(WORDS, min_size=1, max_size=6))
def test_filter_symmetric(a, b):
    qa = PairRecord(" ".join(a), " ".join(b))
    qb = PairRecord(" ".join(b), " ".join(a))
    assert overlap_filter(qa) == overlap_filter(qb)


# -- batch sampler ---------------------------------------------------------------


def _pairs(name, n):
    return [PairRecord(f"q{i} {name}", f"p{i} {name}", name) for i in range(n)]


def test_sampler_single_dataset():
    sampler = BatchSampler({"only": _pairs("only", 8)}, 4, np.random.default_rng(0))
    for _ in range(10):
        name, batch = sampler.next_batch()
        assert name == "only" and len(batch) == 4


def test_sampler_batches_are_homogeneous():
    datasets = {"a": _pairs("a", 12), "b": _pairs("b", 12)}
    sampler = BatchSampler(datasets, 4, np.random.default_rng(1))
    for _ in range(200):
        name, batch = sampler.next_batch()
        assert {r.dataset_id for r in batch} == {name}


def test_sampler_no_replacement_within_epoch():
    data = {"a": _pairs("a", 12)}
    sampler = BatchSampler(data, 4, np.random.default_rng(2))
    seen = []
    for _ in range(3):  # one full epoch
        _, batch = sampler.next_batch()
        seen.extend(r.q for r in batch)
    assert len(set(seen)) == 12


def test_sampler_frequency_proportional():
    datasets = {"a": _pairs("a", 64), "b": _pairs("b", 64)}
    sampler = BatchSampler(datasets, 4, np.random.default_rng(3))
    counts = collections.Counter(sampler.next_batch()[0] for _ in range(10_000))
    frac = counts["a"] / 10_000
    assert 0.47 <= frac <= 0.53


def test_sampler_rejects_small_dataset():
    with pytest.raises(DataError):
        BatchSampler({"tiny": _pairs("tiny", 2)}, 4, np.random.default_rng(0))


# -- class tuples ------------------------------------------------------------------


def _labeled(spec):
    out = []
    for label, n in spec.items():
        out.extend(LabeledRecord(f"{label} text {i}", label, "ds") for i in range(n))
    return out


def test_class_tuples_shape_and_labels(rng):
    records = _labeled({"a": 3, "b": 3, "c": 2})
    by_text = {r.text: r.label for r in records}
    tuples = build_class_tuples(records, rng)
    assert len(tuples) == 8
    for t in tuples:
        assert t.m == 7
        assert by_text[t.q] == by_text[t.p]
        assert t.q != t.p
        assert all(by_text[n] != by_text[t.q] for n in t.negatives)


def test_class_tuples_sample_with_replacement_when_scarce(rng):
    # 2 classes x 2 members: only 2 negative candidates for 7 slots
    tuples = build_class_tuples(_labeled({"a": 2, "b": 2}), rng)
    assert all(t.m == 7 for t in tuples)
    assert all(len(set(t.negatives)) <= 2 for t in tuples)


def test_class_tuples_impossible_raises(rng):
    with pytest.raises(DataError):
        build_class_tuples(_labeled({"a": 1, "b": 1}), rng)


def test_append_unique_id():
    t = TupleRecord("q text", "p text", ("n1", "n2"), "ds")
    tagged = append_unique_id(t, "t01")
    assert tagged.q.endswith(" t01") and tagged.p.endswith(" t01")
    assert all(n.endswith(" t01") for n in tagged.negatives)
    twice = append_unique_id(tagged, "t01")
    assert twice.q.endswith(" t01 t01")  # applying twice appends twice


def test_append_unique_id_distinct_per_tuple():
    ts = [TupleRecord("q", "p", ("n",), "ds") for _ in range(2)]
    tagged = [append_unique_id(t, f"uid{i}") for i, t in enumerate(ts)]
    assert tagged[0].q != tagged[1].q


# -- quality threads ------------------------------------------------------------------


def test_quality_single_answer_skipped(rng):
    threads = [QualityThread("q", (("only answer", 0.9),))]
    tuples, skipped = convert_quality_threads(threads, rng)
    assert tuples == [] and skipped == 1


def test_quality_gap_rule(rng):
    threads = [
        QualityThread("main q", (("best", 0.9), ("close", 0.7), ("far", 0.55))),
        QualityThread("other q", tuple((f"filler {i}", 0.5) for i in range(8))),
    ]
    tuples, skipped = convert_quality_threads(threads, rng)
    main = [t for t in tuples if t.q == "main q"][0]
    assert main.p == "best"
    assert "close" not in main.negatives          # 0.2 gap < 0.3
    assert "far" in main.negatives                # 0.35 gap >= 0.3
    assert main.m == 7                            # padded from the other thread
    assert sum(1 for n in main.negatives if n.startswith("filler")) == 6


def test_quality_tie_break_lowest_index(rng):
    threads = [
        QualityThread("q", (("first best", 0.9), ("second best", 0.9), ("low", 0.1))),
        QualityThread("pad", tuple((f"x{i}", 0.5) for i in range(8))),
    ]
    tuples, _ = convert_quality_threads(threads, rng)
    assert tuples[0].p == "first best"


def test_quality_gap_invariant(rng):
    r = np.random.default_rng(8)
    threads = []
    for t in range(6):
        answers = tuple((f"t{t} answer {i}", float(r.integers(0, 11)) / 10) for i in range(5))
        threads.append(QualityThread(f"query {t}", answers))
    tuples, _ = convert_quality_threads(threads, rng)
    for tup in tuples:
        thread = next(th for th in threads if th.query == tup.q)
        scores = dict(thread.answers)
        best = scores[tup.p]
        for neg in tup.negatives:
            if neg in scores and neg != tup.p:
                # same-thread negatives honor the 0.3 gap
                assert best - scores[neg] >= 0.3 - 1e-12


def test_quality_deterministic(rng):
    threads = [QualityThread("q", (("a", 0.9), ("b", 0.5))),
               QualityThread("r", (("c", 0.8), ("d", 0.1), ("e", 0.85)))]
    t1, _ = convert_quality_threads(threads, np.random.default_rng(5))
    t2, _ = convert_quality_threads(threads, np.random.default_rng(5))
    assert t1 == t2


# -- JSONL round trips ------------------------------------------------------------------


def test_jsonl_roundtrip_all_kinds(tmp_path):
    pairs = [PairRecord("q1", "p1", "d"), PairRecord("q2", "p2", "d")]
    tuples = [TupleRecord("q", "p", ("n1", "n2"), "d")]
    scored = [ScoredPairRecord("q", "p", 3.0, 5.0, "d")]
    labeled = [LabeledRecord("text", "lab", "d")]
    threads = [QualityThread("q", (("a", 0.5),))]
    for records, loader, name in [
        (pairs, load_pairs, "pairs"), (tuples, load_tuples, "tuples"),
        (scored, load_scored_pairs, "scored"), (labeled, load_labeled, "labeled"),
        (threads, load_threads, "threads"),
    ]:
        path = str(tmp_path / f"{name}.jsonl")
        write_jsonl(records, path)
        assert loader(path) == records


def test_jsonl_missing_key_line_numbered(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"q": "x", "p": "y"}\n{"q": "only"}\n')
    with pytest.raises(DataError, match=r"bad\.jsonl:2"):
        load_pairs(str(path))


def test_jsonl_invalid_json_line_numbered(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"q": "x", "p": "y"}\nnot json\n')
    with pytest.raises(DataError, match=r":2"):
        load_pairs(str(path))


def test_jsonl_unknown_keys_ignored(tmp_path):
    path = tmp_path / "extra.jsonl"
    path.write_text('{"q": "x", "p": "y", "dataset": "d", "mystery": 1}\n')
    assert load_pairs(str(path)) == [PairRecord("x", "y", "d")]


def test_scored_pair_score_range():
    with pytest.raises(ValueError):
        ScoredPairRecord("q", "p", 6.0, 5.0)
