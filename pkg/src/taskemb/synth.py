"""Synthetic corpora and failure-case generators.

Two families live here: the seeded topic-world generators used by the toy
training and evaluation runs (disjoint query/document vocabularies per
topic, so an untrained encoder has no lexical shortcut), and the template
banks behind the three synthetic retrieval failure modes: high-overlap
distractors beating low-overlap gold answers, partially matching entity
names, and polar questions answered without a polarity.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import DataError, LabeledRecord, PairRecord, ScoredPairRecord, TupleRecord
from .tokenizer import words_of

FAILURE_KINDS = ("f1", "f2", "f3")


# -- topic worlds ---------------------------------------------------------


def _doc_vocab(topic: int, size: int = 10) -> list[str]:
    return [f"d{topic}w{j}" for j in range(size)]


def _query_vocab(topic: int, size: int = 5) -> list[str]:
    return [f"q{topic}w{j}" for j in range(size)]


def _sample_words(rng: np.random.Generator, vocab: Sequence[str], lo: int, hi: int) -> str:
    n = int(rng.integers(lo, hi + 1))
    return " ".join(vocab[int(i)] for i in rng.integers(0, len(vocab), size=n))


@dataclass
class ToyRetrievalData:
    queries: dict[str, str]
    corpus: dict[str, str]
    qrels: dict[str, dict[str, float]]
    query_topics: dict[str, int]
    doc_topics: dict[str, int]


def make_topic_retrieval_data(
    seed: int, n_topics: int = 8, n_docs: int = 64, n_queries: int = 32
) -> ToyRetrievalData:
    """Round-robin topic assignment; all same-topic docs are relevant to a query."""
    rng = np.random.default_rng([seed, 71])
    corpus, doc_topics = {}, {}
    for i in range(n_docs):
        topic = i % n_topics
        did = f"doc{i:03d}"
        corpus[did] = _sample_words(rng, _doc_vocab(topic), 6, 10)
        doc_topics[did] = topic
    queries, qrels, query_topics = {}, {}, {}
    for i in range(n_queries):
        topic = i % n_topics
        qid = f"qry{i:03d}"
        queries[qid] = _sample_words(rng, _query_vocab(topic), 3, 5)
        query_topics[qid] = topic
        qrels[qid] = {did: 1.0 for did, t in doc_topics.items() if t == topic}
    return ToyRetrievalData(queries, corpus, qrels, query_topics, doc_topics)


def make_topic_pairs(
    seed: int, n_topics: int = 8, pairs_per_topic: int = 24, n_datasets: int = 2
) -> dict[str, list[PairRecord]]:
    """Query-style / document-style pairs from the same topic, split across datasets.

    Each dataset mixes all topics so in-batch negatives cross topics.
    """
    rng = np.random.default_rng([seed, 72])
    datasets: dict[str, list[PairRecord]] = {f"pairs_{c}": [] for c in range(n_datasets)}
    names = sorted(datasets)
    for topic in range(n_topics):
        for j in range(pairs_per_topic):
            q = _sample_words(rng, _query_vocab(topic), 3, 5)
            p = _sample_words(rng, _doc_vocab(topic), 5, 8)
            name = names[(topic * pairs_per_topic + j) % n_datasets]
            datasets[name].append(PairRecord(q, p, name))
    return datasets


def make_topic_tuples(
    seed: int, n_topics: int = 8, tuples_per_topic: int = 8, m: int = 4
) -> dict[str, list[TupleRecord]]:
    """Retrieval-style tuples with cross-topic negatives."""
    rng = np.random.default_rng([seed, 73])
    records = []
    for topic in range(n_topics):
        for _ in range(tuples_per_topic):
            q = _sample_words(rng, _query_vocab(topic), 3, 5)
            p = _sample_words(rng, _doc_vocab(topic), 5, 8)
            negs = []
            for _ in range(m):
                other = int(rng.integers(0, n_topics - 1))
                other = other + 1 if other >= topic else other
                negs.append(_sample_words(rng, _doc_vocab(other), 5, 8))
            records.append(TupleRecord(q, p, tuple(negs), "toy_tuples"))
    return {"toy_tuples": records}


def make_topic_corpus_texts(seed: int, n_topics: int = 8, texts_per_topic: int = 12) -> list[str]:
    """Plain sentences for masked-LM pre-training (doc and query styles mixed)."""
    rng = np.random.default_rng([seed, 74])
    out = []
    for topic in range(n_topics):
        for _ in range(texts_per_topic):
            out.append(_sample_words(rng, _doc_vocab(topic), 5, 9))
            out.append(_sample_words(rng, _query_vocab(topic), 3, 5))
    return out


def make_topic_labeled(
    seed: int, n_topics: int = 4, per_topic: int = 12, dataset_id: str = "toy_labeled"
) -> list[LabeledRecord]:
    rng = np.random.default_rng([seed, 75])
    out = []
    for topic in range(n_topics):
        for _ in range(per_topic):
            out.append(LabeledRecord(_sample_words(rng, _doc_vocab(topic), 4, 8),
                                     f"topic{topic}", dataset_id))
    return out


def make_topic_scored_pairs(
    seed: int, n_topics: int = 4, n_records: int = 48, scale_max: float = 5.0
) -> list[ScoredPairRecord]:
    """Graded similarity pairs: same topic scores high, cross topic low."""
    rng = np.random.default_rng([seed, 76])
    out = []
    for i in range(n_records):
        topic = int(rng.integers(0, n_topics))
        if i % 2 == 0:
            q = _sample_words(rng, _doc_vocab(topic), 4, 7)
            p = _sample_words(rng, _doc_vocab(topic), 4, 7)
            score = float(rng.integers(4, 6))
        else:
            other = (topic + 1 + int(rng.integers(0, n_topics - 1))) % n_topics
            q = _sample_words(rng, _doc_vocab(topic), 4, 7)
            p = _sample_words(rng, _doc_vocab(other), 4, 7)
            score = float(rng.integers(0, 2))
        out.append(ScoredPairRecord(q, p, score, scale_max, "toy_scored"))
    return out


# -- failure-case template banks -------------------------------------------
#
# F1 entries pair a query with a low-overlap gold paraphrase; distractors are
# built from the query's own words plus a twist, so their overlap dominates.

_F1_ENTRIES = [
    ("how do solar panels generate electricity",
     "photovoltaic cells turn sunlight into usable current"),
    ("why do leaves change color in autumn",
     "chlorophyll breaks down and reveals orange pigments each fall"),
    ("how does yeast make bread rise",
     "fermentation releases carbon dioxide that inflates the dough"),
    ("what causes tides in the ocean",
     "gravitational pull from the moon moves huge volumes of seawater"),
    ("how do vaccines protect the body",
     "immunization trains defensive cells to recognize a pathogen"),
    ("why is the sky blue during the day",
     "air molecules scatter short wavelengths of sunlight most strongly"),
    ("how do bees find their way home",
     "foragers navigate using polarized light and remembered landmarks"),
    ("what makes popcorn kernels pop",
     "steam pressure inside the hull bursts the starchy shell"),
]

_F1_TWISTS = [
    "is a question nobody answers here",
    "was asked again and again last week",
    "confused every student in the class",
    "is not explained in this article",
    "remains a popular search query",
    "is the title of a new podcast",
    "appeared on the exam twice",
    "is discussed without any conclusion",
    "made the forum thread very long",
]

# F2: queries about a two-token person name; distractors share exactly one
# name token or reuse it as a common noun.

_F2_FIRST = ["sofia", "albert", "marion", "felix", "ingrid", "tomas", "clara", "viktor"]
_F2_LAST = ["stone", "rivera", "bell", "hartman", "fontaine", "okafor", "lindqvist", "moor"]
_F2_PROFESSIONS = ["botanist", "violinist", "architect", "historian", "chemist", "sculptor"]
_F2_WORKS = [
    "a field guide to alpine mosses",
    "the bridge over the salt marsh",
    "a catalog of baroque sonatas",
    "the restored clocktower archive",
    "a survey of desert pigments",
    "the glass pavilion commission",
]

_F2_DISTRACTOR_TEMPLATES = [
    "{first} {other_last} retired from competitive chess last season",
    "{other_first} {last} owns a bakery near the harbor",
    "the {last} company reported steady quarterly earnings",
    "{first} street will be closed for repaving next month",
    "a {last} is an old word for a shallow lake in some dialects",
    "{other_first} {other_last} interviewed {first} {other_last} on the radio",
    "the {last} family sold their farm decades ago",
    "{first} is a popular name for newborns this year",
]

# F3: polar questions; the gold answer states an explicit yes or no, the
# distractors stay on topic without answering.

_F3_ENTRIES = [
    ("can dogs safely eat chocolate", "no",
     "chocolate is toxic to dogs and even small amounts are unsafe",
     ["chocolate is made from roasted cacao beans and sugar",
      "many dog owners bake homemade treats for their pets",
      "dark chocolate contains more cocoa solids than milk chocolate",
      "dogs have a far better sense of smell than people",
      "a chocolate fair is held downtown every winter",
      "veterinary clinics publish seasonal newsletters about pets",
      "some candy wrappers are recyclable in certain cities"]),
    ("is the great wall visible from low earth orbit", "no",
     "astronauts report the wall is too narrow to pick out without aid",
     ["the great wall stretches thousands of kilometers across china",
      "low earth orbit begins roughly at the karman line",
      "many tourists walk restored sections near beijing",
      "satellites photograph cities at night in high detail",
      "ancient builders used rammed earth and brick",
      "orbital sunrise happens sixteen times a day for astronauts",
      "guidebooks list the wall among popular world landmarks"]),
    ("do penguins live at the north pole", "no",
     "penguins live in the southern hemisphere, not the arctic",
     ["polar bears roam the sea ice of the arctic circle",
      "penguins huddle together to stay warm in winter storms",
      "the north pole sits on drifting sea ice rather than land",
      "emperor penguins dive hundreds of meters for fish",
      "arctic expeditions require months of preparation",
      "zoos keep penguin enclosures chilled year round",
      "migration patterns of seabirds fascinate researchers"]),
    ("can humans breathe pure oxygen indefinitely", "no",
     "extended pure oxygen damages the lungs, so it is not breathable long term",
     ["air is mostly nitrogen with about a fifth oxygen",
      "divers mix gases to manage pressure at depth",
      "hospitals store oxygen in large insulated tanks",
      "astronaut suits regulate gas mixtures automatically",
      "hyperbaric chambers treat certain stubborn wounds",
      "plants release oxygen during photosynthesis",
      "mountaineers carry bottled oxygen on high peaks"]),
    ("is lightning hotter than the surface of the sun", "yes",
     "a lightning channel briefly reaches several times the solar surface temperature",
     ["thunder is the sound of rapidly expanding heated air",
      "the solar surface is around six thousand kelvin",
      "storm chasers photograph dramatic cloud formations",
      "lightning rods route strikes safely into the ground",
      "meteorologists track storms with doppler radar",
      "the sun's corona is far hotter than its surface",
      "summer storms form over warm humid ground"]),
    ("do honeybees die after stinging a person", "yes",
     "a honeybee's barbed stinger tears away, which kills the bee",
     ["wasps can sting repeatedly without harm to themselves",
      "beekeepers wear veils and gloves during inspections",
      "honey is stored in hexagonal wax cells",
      "a hive contains one queen and thousands of workers",
      "pollination supports a large share of food crops",
      "smoke calms a colony before the hive is opened",
      "drones leave the hive on warm afternoons"]),
]


def word_overlap(a: str, b: str) -> float:
    """Fraction of a's word types that also occur in b."""
    wa, wb = set(words_of(a)), set(words_of(b))
    if not wa:
        return 0.0
    return len(wa & wb) / len(wa)


def _gen_f1(n: int, rng: np.random.Generator) -> list[TupleRecord]:
    out = []
    for i in range(n):
        query, gold = _F1_ENTRIES[int(rng.integers(0, len(_F1_ENTRIES)))]
        qwords = query.split()
        twists = rng.permutation(len(_F1_TWISTS))[:7]
        distractors = []
        for t in twists:
            # drop one query word, keep the rest: overlap stays >= 60%
            drop = int(rng.integers(0, len(qwords)))
            kept = [w for j, w in enumerate(qwords) if j != drop]
            distractors.append(" ".join(kept) + " " + _F1_TWISTS[int(t)])
        rec = TupleRecord(query, gold, tuple(distractors), "f1")
        mean_d = float(np.mean([word_overlap(query, d) for d in rec.negatives]))
        if mean_d <= word_overlap(query, gold):
            raise AssertionError("f1 generator produced low-overlap distractors")
        out.append(rec)
    return out


def _gen_f2(n: int, rng: np.random.Generator) -> list[TupleRecord]:
    out = []
    for i in range(n):
        fi = int(rng.integers(0, len(_F2_FIRST)))
        li = int(rng.integers(0, len(_F2_LAST)))
        first, last = _F2_FIRST[fi], _F2_LAST[li]
        other_first = _F2_FIRST[(fi + 1 + int(rng.integers(0, len(_F2_FIRST) - 1))) % len(_F2_FIRST)]
        other_last = _F2_LAST[(li + 1 + int(rng.integers(0, len(_F2_LAST) - 1))) % len(_F2_LAST)]
        profession = _F2_PROFESSIONS[int(rng.integers(0, len(_F2_PROFESSIONS)))]
        work = _F2_WORKS[int(rng.integers(0, len(_F2_WORKS)))]
        query = f"who is {first} {last}"
        gold = f"{first} {last} is a {profession} known for {work}"
        picks = rng.permutation(len(_F2_DISTRACTOR_TEMPLATES))[:7]
        distractors = tuple(
            _F2_DISTRACTOR_TEMPLATES[int(t)].format(
                first=first, last=last, other_first=other_first, other_last=other_last)
            for t in picks
        )
        out.append(TupleRecord(query, gold, distractors, "f2"))
    return out


def _gen_f3(n: int, rng: np.random.Generator) -> list[TupleRecord]:
    out = []
    for i in range(n):
        question, polarity, answer, topical = _F3_ENTRIES[int(rng.integers(0, len(_F3_ENTRIES)))]
        gold = f"{polarity}, {answer}"
        picks = rng.permutation(len(topical))[:7]
        distractors = tuple(topical[int(t)] for t in picks)
        out.append(TupleRecord(question, gold, distractors, "f3"))
    return out


def gen_failure_case(kind: str, n: int, rng: np.random.Generator) -> list[TupleRecord]:
    """n query/gold/7-distractor records for failure mode f1, f2 or f3."""
    if n < 0:
        raise ValueError("n must be non-negative")
    if kind == "f1":
        return _gen_f1(n, rng)
    if kind == "f2":
        return _gen_f2(n, rng)
    if kind == "f3":
        return _gen_f3(n, rng)
    raise DataError(f"unknown failure kind {kind!r}; expected one of {FAILURE_KINDS}")
