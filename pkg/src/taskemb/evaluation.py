"""Retrieval, similarity, clustering, and classification evaluation.

Metrics: nDCG@k with exponential gain, average precision / mAP, Spearman
correlation with average ranks on ties, k-means clustering scored by
v-measure, and a logistic-regression probe on frozen embeddings.  On top
sit the dimension sweep, the 2x2 adapter/instruction ablation grid, and
the failure-case evaluation (one gold vs seven distractors per query).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import DataError, TupleRecord, _iter_jsonl, _need, atomic_write_text
from .encoder import EncoderModel, TaskKind
from .tensor import NumericError

BOUNDED_METRICS = ("ndcg", "map", "accuracy", "v_measure")


# -- ranking metrics -----------------------------------------------------


def dcg_at_k(rels: Sequence[float], k: int) -> float:
    """Discounted cumulative gain with exponential (2^rel - 1) numerators."""
    return sum((2.0 ** r - 1.0) / math.log2(rank + 2) for rank, r in enumerate(rels[:k]))


def ndcg_single(ranked_ids: Sequence, rels_by_id: Mapping, k: int = 10) -> float:
    rels = [float(rels_by_id.get(d, 0.0)) for d in ranked_ids]
    ideal = sorted((float(r) for r in rels_by_id.values()), reverse=True)
    denom = dcg_at_k(ideal, k)
    if denom == 0.0:
        raise ValueError("query has no relevant documents")
    return dcg_at_k(rels, k) / denom


def ndcg_at_k(
    run: Mapping[str, Sequence], qrels: Mapping[str, Mapping], k: int = 10
) -> tuple[float, int]:
    """Mean nDCG@k over queries; queries without relevant docs are excluded.

    Returns (mean, number of excluded queries).
    """
    scores, excluded = [], 0
    for qid in sorted(run):
        rels = qrels.get(qid, {})
        if not any(float(r) > 0 for r in rels.values()):
            excluded += 1
            continue
        scores.append(ndcg_single(run[qid], rels, k))
    if not scores:
        raise ValueError("no evaluable query has relevant documents")
    return float(np.mean(scores)), excluded


def average_precision(ranked_ids: Sequence, relevant: set) -> float:
    """Mean of precision@rank over the ranks holding relevant documents."""
    if not relevant:
        raise ValueError("empty relevant set")
    hits, precisions = 0, []
    for rank, did in enumerate(ranked_ids, start=1):
        if did in relevant:
            hits += 1
            precisions.append(hits / rank)
    return float(np.mean(precisions)) if precisions else 0.0


def mean_average_precision(
    run: Mapping[str, Sequence], qrels: Mapping[str, Mapping]
) -> tuple[float, int]:
    scores, excluded = [], 0
    for qid in sorted(run):
        relevant = {d for d, r in qrels.get(qid, {}).items() if float(r) > 0}
        if not relevant:
            excluded += 1
            continue
        scores.append(average_precision(run[qid], relevant))
    if not scores:
        raise ValueError("no evaluable query has relevant documents")
    return float(np.mean(scores)), excluded


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0  # 1-based average rank
        i = j + 1
    return ranks


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson correlation of average-ranked values (ties share mean ranks)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("spearman needs two equal-length vectors of length >= 2")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise NumericError("spearman undefined for a constant input")
    rx, ry = _average_ranks(x), _average_ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    return float((rx * ry).sum() / np.sqrt((rx ** 2).sum() * (ry ** 2).sum()))


# -- clustering ----------------------------------------------------------


def kmeans(points: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding; deterministic given the seed.

    Stops after 100 iterations or when centroids move less than 1e-6.
    Empty clusters are re-seeded from the point farthest from its centroid.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if k < 1 or k > n:
        raise ValueError("need 1 <= k <= number of points")
    rng = np.random.default_rng(seed)

    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[int(rng.integers(0, n))]
    for j in range(1, k):
        d2 = np.min(((points[:, None, :] - centroids[None, :j, :]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        if total == 0.0:
            centroids[j] = points[int(rng.integers(0, n))]
        else:
            centroids[j] = points[int(rng.choice(n, p=d2 / total))]

    labels = np.zeros(n, dtype=np.int64)
    for _ in range(100):
        dists = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)
        labels = dists.argmin(axis=1)
        new_centroids = centroids.copy()
        for j in range(k):
            member = labels == j
            if member.any():
                new_centroids[j] = points[member].mean(axis=0)
            else:
                farthest = int(np.argmax(dists[np.arange(n), labels]))
                new_centroids[j] = points[farthest]
                labels[farthest] = j
        movement = np.sqrt(((new_centroids - centroids) ** 2).sum(-1)).max()
        centroids = new_centroids
        if movement < 1e-6:
            break
    return labels


def _entropy(counts: np.ndarray) -> float:
    total = counts.sum()
    p = counts[counts > 0] / total
    return float(-(p * np.log(p)).sum())


def v_measure(pred_labels: Sequence, gold_labels: Sequence) -> float:
    """Harmonic mean of homogeneity and completeness from the contingency table."""
    pred = list(pred_labels)
    gold = list(gold_labels)
    if len(pred) != len(gold) or not pred:
        raise ValueError("label lists must be non-empty and equal length")
    pred_ids = {v: i for i, v in enumerate(dict.fromkeys(pred))}
    gold_ids = {v: i for i, v in enumerate(dict.fromkeys(gold))}
    table = np.zeros((len(gold_ids), len(pred_ids)))
    for g, p in zip(gold, pred):
        table[gold_ids[g], pred_ids[p]] += 1.0

    n = table.sum()
    h_gold = _entropy(table.sum(axis=1))
    h_pred = _entropy(table.sum(axis=0))
    h_gold_given_pred = sum(
        (table[:, j].sum() / n) * _entropy(table[:, j]) for j in range(table.shape[1])
    )
    h_pred_given_gold = sum(
        (table[i, :].sum() / n) * _entropy(table[i, :]) for i in range(table.shape[0])
    )
    homogeneity = 1.0 if h_gold == 0.0 else 1.0 - h_gold_given_pred / h_gold
    completeness = 1.0 if h_pred == 0.0 else 1.0 - h_pred_given_gold / h_pred
    if homogeneity + completeness == 0.0:
        return 0.0
    return 2.0 * homogeneity * completeness / (homogeneity + completeness)


# -- logistic probe --------------------------------------------------------


def logistic_probe(
    train_emb: np.ndarray,
    train_labels: Sequence,
    test_emb: np.ndarray,
    test_labels: Sequence,
    iters: int = 500,
    lr: float = 0.1,
    l2: float = 1e-4,
) -> float:
    """Test accuracy of a full-batch multinomial logistic regression.

    Weights start at zero, run ``iters`` gradient steps, and test rows whose
    class never appears in training count as errors.
    """
    train_emb = np.asarray(train_emb, dtype=np.float64)
    test_emb = np.asarray(test_emb, dtype=np.float64)
    classes = sorted(set(train_labels), key=repr)
    if len(classes) < 2:
        raise ValueError("probe needs at least two training classes")
    cls_idx = {c: i for i, c in enumerate(classes)}
    y = np.array([cls_idx[c] for c in train_labels])
    n, d = train_emb.shape
    onehot = np.zeros((n, len(classes)))
    onehot[np.arange(n), y] = 1.0

    w = np.zeros((len(classes), d))
    b = np.zeros(len(classes))
    for _ in range(iters):
        logits = train_emb @ w.T + b
        logits -= logits.max(axis=1, keepdims=True)
        probs = np.exp(logits)
        probs /= probs.sum(axis=1, keepdims=True)
        delta = (probs - onehot) / n
        w -= lr * (delta.T @ train_emb + l2 * w)
        b -= lr * delta.sum(axis=0)

    pred = (test_emb @ w.T + b).argmax(axis=1)
    correct = sum(
        1 for p, gold in zip(pred, test_labels)
        if gold in cls_idx and p == cls_idx[gold]
    )
    return correct / len(test_labels)


# -- reports ----------------------------------------------------------------


@dataclass
class EvalReport:
    """One evaluation run: metric values plus enough metadata to rerun it."""

    run_id: str
    task: str
    adapter_config: dict
    metrics: dict[str, float]
    seed: int
    mrl_dim: int | None = None
    timestamp: str = ""  # left deterministic unless a caller injects wall-clock

    def __post_init__(self):
        for name, value in self.metrics.items():
            base = name.split("@")[0]
            if base in BOUNDED_METRICS and not -1e-9 <= value <= 1.0 + 1e-9:
                raise ValueError(f"metric {name} out of range: {value}")
            if base == "spearman" and not -1.0 - 1e-9 <= value <= 1.0 + 1e-9:
                raise ValueError(f"metric {name} out of range: {value}")

    def to_json(self) -> str:
        payload = {
            "run_id": self.run_id, "task": self.task,
            "adapter_config": self.adapter_config, "metrics": self.metrics,
            "seed": self.seed, "mrl_dim": self.mrl_dim, "timestamp": self.timestamp,
        }
        return json.dumps(payload, sort_keys=True, indent=1)

    def write(self, path: str) -> None:
        atomic_write_text(path, self.to_json() + "\n")


def load_qrels(path: str) -> dict[str, dict[str, float]]:
    """JSONL {"qid","did","rel"} into nested qid -> did -> relevance."""
    qrels: dict[str, dict[str, float]] = {}
    for lineno, obj in _iter_jsonl(path):
        qid = str(_need(obj, "qid", path, lineno))
        did = str(_need(obj, "did", path, lineno))
        rel = float(_need(obj, "rel", path, lineno))
        if rel < 0:
            raise DataError(f"{path}:{lineno}: relevance must be >= 0")
        qrels.setdefault(qid, {})[did] = rel
    return qrels


# -- model-level harnesses ---------------------------------------------------


def rank_corpus(
    model: EncoderModel,
    queries: Mapping[str, str],
    corpus: Mapping[str, str],
    query_task: TaskKind,
    passage_task: TaskKind,
    dim: int | None = None,
    instructions: bool = False,
) -> dict[str, list[str]]:
    """Rank every corpus document per query by cosine similarity (stable ties)."""
    qids = sorted(queries)
    dids = sorted(corpus)
    q_emb = model.embed([queries[q] for q in qids], task=query_task,
                        target_dim=dim, instructions=instructions)
    d_emb = model.embed([corpus[d] for d in dids], task=passage_task,
                        target_dim=dim, instructions=instructions)
    sims = q_emb @ d_emb.T
    run = {}
    for i, qid in enumerate(qids):
        order = sorted(range(len(dids)), key=lambda j: (-sims[i, j], dids[j]))
        run[qid] = [dids[j] for j in order]
    return run


def retrieval_eval(
    model: EncoderModel,
    queries: Mapping[str, str],
    corpus: Mapping[str, str],
    qrels: Mapping[str, Mapping[str, float]],
    query_task: TaskKind = TaskKind.RETRIEVAL_QUERY,
    passage_task: TaskKind = TaskKind.RETRIEVAL_PASSAGE,
    dim: int | None = None,
    instructions: bool = False,
    k: int = 10,
) -> dict[str, float]:
    run = rank_corpus(model, queries, corpus, query_task, passage_task,
                      dim=dim, instructions=instructions)
    ndcg, excluded = ndcg_at_k(run, qrels, k=k)
    m_ap, _ = mean_average_precision(run, qrels)
    return {f"ndcg@{k}": ndcg, "map": m_ap, "excluded_queries": float(excluded)}


def mrl_sweep(
    model: EncoderModel,
    evaluate: Callable[[EncoderModel, int], dict[str, float]],
    dims: Sequence[int],
    task: str = "retrieval",
    seed: int = 0,
) -> list[EvalReport]:
    """Run ``evaluate`` at each truncation dim and report per-dim deltas vs the largest."""
    dims = [int(d) for d in dims]
    bad = [d for d in dims if d not in model.config.mrl_dims]
    if bad:
        raise ValueError(f"dims {bad} not in the configured mrl_dims")
    per_dim = {d: evaluate(model, d) for d in dims}
    top = max(dims)
    reports = []
    for d in dims:
        metrics = dict(per_dim[d])
        for name, value in per_dim[top].items():
            if name in metrics and not name.startswith("excluded"):
                metrics[f"delta_vs_{top}:{name}"] = metrics[name] - value
        reports.append(EvalReport(
            run_id=f"mrl-{task}-dim{d}", task=task,
            adapter_config={"mrl_dim": d}, metrics=metrics, seed=seed, mrl_dim=d,
        ))
    return reports


@dataclass
class AblationVariant:
    """One trained cell of the adapter-count x instruction grid."""

    model: EncoderModel
    query_task: TaskKind
    passage_task: TaskKind
    instructions: bool


def adapter_ablation(
    variants: Mapping[tuple[int, bool], AblationVariant],
    queries: Mapping[str, str],
    corpus: Mapping[str, str],
    qrels: Mapping[str, Mapping[str, float]],
    dim: int | None = None,
    k: int = 10,
) -> dict:
    """nDCG@k for the four {1, 2 adapters} x {with, without instructions} cells."""
    cells = {}
    for n_adapters in (1, 2):
        for instr in (True, False):
            if (n_adapters, instr) not in variants:
                raise DataError(f"missing ablation variant: {n_adapters} adapters, "
                                f"instructions={instr}")
            v = variants[(n_adapters, instr)]
            metrics = retrieval_eval(
                v.model, queries, corpus, qrels,
                query_task=v.query_task, passage_task=v.passage_task,
                dim=dim, instructions=v.instructions, k=k,
            )
            cells[_cell_name(n_adapters, instr)] = metrics[f"ndcg@{k}"]

    one = [cells[_cell_name(1, True)], cells[_cell_name(1, False)]]
    two = [cells[_cell_name(2, True)], cells[_cell_name(2, False)]]
    report = {
        "metric": f"ndcg@{k}",
        "cells": cells,
        "column_averages": dict(cells),  # single toy task: column mean == cell
        "one_adapter_mean": float(np.mean(one)),
        "two_adapter_mean": float(np.mean(two)),
    }
    report["two_adapters_ge_one"] = bool(report["two_adapter_mean"] >= report["one_adapter_mean"])
    return report


def _cell_name(n_adapters: int, instructions: bool) -> str:
    suffix = "with_instructions" if instructions else "without_instructions"
    return f"{n_adapters}_adapter_{suffix}"


def failure_eval(
    model: EncoderModel,
    failure_sets: Mapping[str, Sequence[TupleRecord]],
    query_task: TaskKind = TaskKind.RETRIEVAL_QUERY,
    passage_task: TaskKind = TaskKind.RETRIEVAL_PASSAGE,
    dim: int | None = None,
    instructions: bool = False,
) -> dict[str, dict[str, float]]:
    """Rank gold-vs-distractor candidate sets per query; report mAP and nDCG@10.

    Every record supplies one gold answer and its distractors; candidates
    are ranked by cosine against the query embedding.
    """
    results = {}
    for kind in sorted(failure_sets):
        records = list(failure_sets[kind])
        if not records:
            raise DataError(f"failure set {kind!r} is empty")
        run: dict[str, list[str]] = {}
        qrels: dict[str, dict[str, float]] = {}
        for idx, rec in enumerate(records):
            if not rec.negatives:
                raise DataError(f"failure record {idx} of {kind!r} has no distractors")
            qid = f"{kind}-{idx}"
            cand_ids = ["gold"] + [f"d{j}" for j in range(rec.m)]
            texts = [rec.p] + list(rec.negatives)
            q_emb = model.embed([rec.q], task=query_task, target_dim=dim,
                                instructions=instructions)
            c_emb = model.embed(texts, task=passage_task, target_dim=dim,
                                instructions=instructions)
            sims = (q_emb @ c_emb.T)[0]
            order = sorted(range(len(texts)), key=lambda j: (-sims[j], cand_ids[j]))
            run[qid] = [cand_ids[j] for j in order]
            qrels[qid] = {"gold": 1.0}
        m_ap, _ = mean_average_precision(run, qrels)
        ndcg, _ = ndcg_at_k(run, qrels, k=10)
        results[kind] = {"map": m_ap, "ndcg@10": ndcg}
    return results


# -- plain-text tables --------------------------------------------------------


def render_failure_table(results: Mapping[str, Mapping[str, float]]) -> str:
    kinds = sorted(results)
    lines = ["Failure-case evaluation", "case   " + "  ".join(f"{k:>8}" for k in kinds)]
    for metric in ("map", "ndcg@10"):
        row = [f"{results[k].get(metric, float('nan')) * 100:8.2f}" for k in kinds]
        lines.append(f"{metric:<7}" + "  ".join(row))
    return "\n".join(lines)


def render_ablation_table(report: Mapping) -> str:
    c = report["cells"]
    lines = [
        f"Asymmetric retrieval ablation [{report['metric']} in %]",
        "                w/ instr   w/o instr",
        (f"1 adapter      {c[_cell_name(1, True)] * 100:9.2f}"
         f"   {c[_cell_name(1, False)] * 100:9.2f}"),
        (f"2 adapters     {c[_cell_name(2, True)] * 100:9.2f}"
         f"   {c[_cell_name(2, False)] * 100:9.2f}"),
        (f"mean           one={report['one_adapter_mean'] * 100:.2f}"
         f"  two={report['two_adapter_mean'] * 100:.2f}"),
    ]
    return "\n".join(lines)
