"""Training records, JSONL serialization, and batch/tuple construction.

Record families: text pairs, query/positive/negative tuples, scored pairs
(graded similarity), labeled texts, and quality-scored answer threads.
On-disk form is JSONL, one record per line; unknown keys are ignored and
missing required keys raise a line-numbered ``DataError``.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .tokenizer import words_of

logger = logging.getLogger("taskemb")


class DataError(Exception):
    """Malformed records, unusable datasets, or broken files."""


# -- record types ------------------------------------------------------


@dataclass(frozen=True)
class PairRecord:
    q: str
    p: str
    dataset_id: str = "default"

    def __post_init__(self):
        if not self.q or not self.p:
            raise ValueError("pair texts must be non-empty")


@dataclass(frozen=True)
class TupleRecord:
    """Query, positive, and m >= 0 negatives (classification tuples use m = 7)."""

    q: str
    p: str
    negatives: tuple[str, ...] = ()
    dataset_id: str = "default"

    def __post_init__(self):
        if not self.q or not self.p:
            raise ValueError("tuple texts must be non-empty")
        object.__setattr__(self, "negatives", tuple(self.negatives))

    @property
    def m(self) -> int:
        return len(self.negatives)


@dataclass(frozen=True)
class ScoredPairRecord:
    q: str
    p: str
    score: float
    scale_max: float = 1.0
    dataset_id: str = "default"

    def __post_init__(self):
        if not self.q or not self.p:
            raise ValueError("pair texts must be non-empty")
        if not 0.0 <= self.score <= self.scale_max:
            raise ValueError("score must lie in [0, scale_max]")

    @property
    def zeta(self) -> float:
        return self.score / self.scale_max


@dataclass(frozen=True)
class LabeledRecord:
    text: str
    label: str | int
    dataset_id: str = "default"

    def __post_init__(self):
        if not self.text:
            raise ValueError("text must be non-empty")
        if self.label is None or self.label == "":
            raise ValueError("label must be non-empty")


@dataclass(frozen=True)
class QualityThread:
    query: str
    answers: tuple[tuple[str, float], ...]

    def __post_init__(self):
        answers = tuple((str(t), float(s)) for t, s in self.answers)
        for _, s in answers:
            if not 0.0 <= s <= 1.0:
                raise ValueError("quality scores must lie in [0, 1]")
        object.__setattr__(self, "answers", answers)


# -- JSONL I/O ---------------------------------------------------------


def atomic_write_text(path: str, text: str) -> None:
    """Write to a temp file in the target directory, then rename atomically."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path: str, blob: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _iter_jsonl(path: str):
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise DataError(f"{path}:{lineno}: record must be a JSON object")
            yield lineno, obj


def _need(obj: dict, key: str, path: str, lineno: int):
    if key not in obj:
        raise DataError(f"{path}:{lineno}: missing required key {key!r}")
    return obj[key]


def load_pairs(path: str) -> list[PairRecord]:
    out = []
    for lineno, obj in _iter_jsonl(path):
        try:
            out.append(PairRecord(
                q=str(_need(obj, "q", path, lineno)),
                p=str(_need(obj, "p", path, lineno)),
                dataset_id=str(obj.get("dataset", "default")),
            ))
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
    return out


def load_tuples(path: str) -> list[TupleRecord]:
    out = []
    for lineno, obj in _iter_jsonl(path):
        negs = _need(obj, "negs", path, lineno)
        if not isinstance(negs, list):
            raise DataError(f"{path}:{lineno}: 'negs' must be a list")
        try:
            out.append(TupleRecord(
                q=str(_need(obj, "q", path, lineno)),
                p=str(_need(obj, "p", path, lineno)),
                negatives=tuple(str(n) for n in negs),
                dataset_id=str(obj.get("dataset", "default")),
            ))
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
    return out


def load_scored_pairs(path: str) -> list[ScoredPairRecord]:
    out = []
    for lineno, obj in _iter_jsonl(path):
        try:
            out.append(ScoredPairRecord(
                q=str(_need(obj, "q", path, lineno)),
                p=str(_need(obj, "p", path, lineno)),
                score=float(_need(obj, "score", path, lineno)),
                scale_max=float(obj.get("scale_max", 1.0)),
                dataset_id=str(obj.get("dataset", "default")),
            ))
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
    return out


def load_labeled(path: str) -> list[LabeledRecord]:
    out = []
    for lineno, obj in _iter_jsonl(path):
        label = _need(obj, "label", path, lineno)
        try:
            out.append(LabeledRecord(
                text=str(_need(obj, "text", path, lineno)),
                label=label if isinstance(label, int) else str(label),
                dataset_id=str(obj.get("dataset", "default")),
            ))
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
    return out


def load_threads(path: str) -> list[QualityThread]:
    out = []
    for lineno, obj in _iter_jsonl(path):
        answers = _need(obj, "answers", path, lineno)
        if not isinstance(answers, list):
            raise DataError(f"{path}:{lineno}: 'answers' must be a list")
        parsed = []
        for a in answers:
            if not isinstance(a, dict) or "text" not in a or "score" not in a:
                raise DataError(f"{path}:{lineno}: each answer needs 'text' and 'score'")
            parsed.append((str(a["text"]), float(a["score"])))
        try:
            out.append(QualityThread(query=str(_need(obj, "query", path, lineno)),
                                     answers=tuple(parsed)))
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
    return out


def record_to_obj(rec) -> dict:
    if isinstance(rec, PairRecord):
        return {"q": rec.q, "p": rec.p, "dataset": rec.dataset_id}
    if isinstance(rec, TupleRecord):
        return {"q": rec.q, "p": rec.p, "negs": list(rec.negatives), "dataset": rec.dataset_id}
    if isinstance(rec, ScoredPairRecord):
        return {"q": rec.q, "p": rec.p, "score": rec.score,
                "scale_max": rec.scale_max, "dataset": rec.dataset_id}
    if isinstance(rec, LabeledRecord):
        return {"text": rec.text, "label": rec.label, "dataset": rec.dataset_id}
    if isinstance(rec, QualityThread):
        return {"query": rec.query,
                "answers": [{"text": t, "score": s} for t, s in rec.answers]}
    raise TypeError(f"unknown record type {type(rec).__name__}")


def write_jsonl(records: Iterable, path: str) -> None:
    lines = [json.dumps(record_to_obj(r), ensure_ascii=False, sort_keys=True) for r in records]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


# -- pair filtering ----------------------------------------------------


def overlap_filter(pair: PairRecord) -> bool:
    """True when the pair should be kept.

    Dropped when, counting word tokens of the shorter text, at least
    max(ceil(0.8 * n), 4) occur as case-insensitive substrings of the longer
    raw text.  Ties in word count check both directions so the decision is
    symmetric.
    """
    qw, pw = words_of(pair.q), words_of(pair.p)

    def drops(short_words: list[str], long_text: str) -> bool:
        n = len(short_words)
        haystack = long_text.lower()
        c = sum(1 for w in short_words if w in haystack)
        return c >= max(-(-4 * n // 5), 4)  # ceil(0.8 n) with exact integer math

    if len(qw) < len(pw):
        return not drops(qw, pair.p)
    if len(pw) < len(qw):
        return not drops(pw, pair.q)
    return not (drops(qw, pair.p) or drops(pw, pair.q))


# -- batch sampling ----------------------------------------------------


class BatchSampler:
    """Homogeneous batches: one dataset per batch, epochs without replacement.

    The dataset for each batch is drawn with probability proportional to its
    remaining (unconsumed) size in the current epoch; a dataset that cannot
    fill one more batch is reshuffled into a fresh epoch and the event is
    logged.
    """

    def __init__(self, datasets: dict[str, Sequence], batch_size: int, rng: np.random.Generator):
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        for name, records in datasets.items():
            if len(records) < batch_size:
                raise DataError(f"dataset {name!r} has fewer than batch_size records")
        if not datasets:
            raise DataError("no datasets to sample from")
        self.batch_size = batch_size
        self.rng = rng
        self._names = sorted(datasets)
        self._records = {n: list(datasets[n]) for n in self._names}
        self._order = {n: self._shuffled(n) for n in self._names}
        self._cursor = {n: 0 for n in self._names}

    def _shuffled(self, name: str) -> np.ndarray:
        idx = np.arange(len(self._records[name]))
        self.rng.shuffle(idx)
        return idx

    def _remaining(self, name: str) -> int:
        return len(self._records[name]) - self._cursor[name]

    def next_batch(self) -> tuple[str, list]:
        weights = np.array([max(self._remaining(n), 0) for n in self._names], dtype=np.float64)
        if weights.sum() == 0:  # every dataset exactly exhausted: start all over
            for n in self._names:
                self._order[n] = self._shuffled(n)
                self._cursor[n] = 0
            weights = np.array([len(self._records[n]) for n in self._names], dtype=np.float64)
        name = self._names[int(self.rng.choice(len(self._names), p=weights / weights.sum()))]
        if self._remaining(name) < self.batch_size:
            logger.info("dataset %r exhausted mid-epoch; reshuffling", name)
            self._order[name] = self._shuffled(name)
            self._cursor[name] = 0
        start = self._cursor[name]
        take = self._order[name][start:start + self.batch_size]
        self._cursor[name] = start + self.batch_size
        return name, [self._records[name][i] for i in take]


# -- tuple construction ------------------------------------------------


def build_class_tuples(
    labeled: Sequence[LabeledRecord], rng: np.random.Generator, n_negatives: int = 7
) -> list[TupleRecord]:
    """One tuple per member of each class with >= 2 members.

    q is the member, p a random other member of the same class, and the
    negatives are texts sampled uniformly from the other classes (with
    replacement when fewer than ``n_negatives`` candidates exist).
    """
    groups: dict = {}
    for rec in labeled:
        groups.setdefault(rec.label, []).append(rec)

    out = []
    for label, members in groups.items():
        if len(members) < 2:
            continue
        pool = [r.text for other, rows in groups.items() if other != label for r in rows]
        if not pool:
            continue
        for qi, rec in enumerate(members):
            others = [r for j, r in enumerate(members) if j != qi]
            p = others[int(rng.integers(0, len(others)))]
            replace = len(pool) < n_negatives
            negs = [pool[int(i)] for i in rng.choice(len(pool), size=n_negatives, replace=replace)]
            out.append(TupleRecord(rec.text, p.text, tuple(negs), rec.dataset_id))
    if not out:
        raise DataError("cannot form any class tuple: need >= 2 classes and a class with >= 2 members")
    return out


def append_unique_id(record: TupleRecord, uid: str) -> TupleRecord:
    """Append the same id string (space-separated) to q, p and every negative."""
    return TupleRecord(
        q=f"{record.q} {uid}",
        p=f"{record.p} {uid}",
        negatives=tuple(f"{n} {uid}" for n in record.negatives),
        dataset_id=record.dataset_id,
    )


def convert_quality_threads(
    threads: Sequence[QualityThread],
    rng: np.random.Generator,
    n_negatives: int = 7,
    min_gap: float = 0.3,
) -> tuple[list[TupleRecord], int]:
    """Turn quality-scored answer threads into hard-negative tuples.

    Threads with fewer than two answers are skipped (and counted).  The
    best-scoring answer (ties: lowest index) is the positive; same-thread
    answers scoring at least ``min_gap`` below it become negatives, padded
    up to ``n_negatives`` with random answers from other threads.
    Returns (tuples, skipped_count).
    """
    tuples: list[TupleRecord] = []
    skipped = 0
    for ti, thread in enumerate(threads):
        if len(thread.answers) < 2:
            skipped += 1
            continue
        scores = [s for _, s in thread.answers]
        best = max(range(len(scores)), key=lambda i: scores[i])  # first max wins ties
        best_text, best_score = thread.answers[best]
        negs = [t for i, (t, s) in enumerate(thread.answers)
                if i != best and s <= best_score - min_gap]
        negs = negs[:n_negatives]
        if len(negs) < n_negatives:
            pool = [t for tj, other in enumerate(threads) if tj != ti
                    for t, _ in other.answers]
            need = n_negatives - len(negs)
            if not pool:
                skipped += 1
                continue
            replace = len(pool) < need
            negs += [pool[int(i)] for i in rng.choice(len(pool), size=need, replace=replace)]
        tuples.append(TupleRecord(thread.query, best_text, tuple(negs), "quality"))
    return tuples, skipped
