"""Training objectives.

Masked-LM cross-entropy, bidirectional pair InfoNCE, InfoNCE extended with
per-tuple hard negatives, the CoSent ranking loss, a label-separation loss
built on CoSent, and a multi-resolution wrapper that sums a loss over
truncated-and-renormalized embeddings.

Every loss is a pure function of tensors and differentiates through the
autodiff graph.  All softmax-style sums run through logsumexp.
"""

from __future__ import annotations

import warnings
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, concat, cosine_similarity_matrix, gather_rows

# Default temperatures per objective family.
DEFAULT_TEMPERATURES = {
    "pairs": 0.05,
    "text-matching": 0.05,
    "classification": 0.02,
    "separation": 0.02,
    "retrieval": 0.05,
}


def _check_tau(tau: float) -> float:
    tau = float(tau)
    if tau <= 0.0:
        raise ValueError("temperature must be positive")
    return tau


def mlm_loss(logits: Tensor, target_ids: np.ndarray, masked_positions: np.ndarray) -> Tensor:
    """Mean cross-entropy over masked positions only.

    ``logits`` is batch x len x vocab; ``target_ids`` holds the original
    token ids and ``masked_positions`` is a boolean batch x len selector.
    """
    if logits.ndim != 3:
        raise ValueError("logits must be batch x len x vocab")
    mask = np.asarray(masked_positions, dtype=bool)
    targets = np.asarray(target_ids, dtype=np.int64)
    if mask.shape != logits.shape[:2] or targets.shape != mask.shape:
        raise ValueError("targets and mask must match the logit batch layout")
    n_masked = int(mask.sum())
    if n_masked == 0:
        raise ValueError("mlm_loss requires at least one masked position")

    b, l, v = logits.shape
    flat_idx = np.flatnonzero(mask.reshape(-1))
    picked = gather_rows(logits.reshape(b * l, v), flat_idx)
    onehot = np.zeros((n_masked, v))
    onehot[np.arange(n_masked), targets.reshape(-1)[flat_idx]] = 1.0
    ce = picked.logsumexp(axis=-1) - (picked * onehot).sum(axis=-1)
    return ce.mean()


def info_nce(sim: Tensor, tau: float) -> Tensor:
    """-sum_i log softmax(sim_i/tau)[i], the InfoNCE loss over a square matrix."""
    tau = _check_tau(tau)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ValueError("similarity matrix must be square")
    k = sim.shape[0]
    scaled = sim * (1.0 / tau)
    diag = (scaled * np.eye(k)).sum(axis=-1)
    return (scaled.logsumexp(axis=-1) - diag).sum()


def pair_loss_bidirectional(q_emb: Tensor, p_emb: Tensor, tau: float) -> Tensor:
    """InfoNCE in both directions over matched (q_i, p_i) rows."""
    if q_emb.shape[0] != p_emb.shape[0]:
        raise ValueError("query and passage batches must have equal row counts")
    sim = cosine_similarity_matrix(q_emb, p_emb)
    return info_nce(sim, tau) + info_nce(sim.transpose(), tau)


def triplet_loss(q_emb: Tensor, p_emb: Tensor, neg_emb: Tensor, tau: float) -> Tensor:
    """InfoNCE with every in-batch positive and every tuple's negatives as candidates.

    ``neg_emb`` is k x m x d (m may be 0).  Forward direction: each query is
    scored against all k positives plus all k*m negatives, with its own
    positive as the target.  Reverse direction: each positive against the
    in-batch queries only.  Both terms are means over the k tuples.
    """
    tau = _check_tau(tau)
    if q_emb.ndim != 2 or p_emb.ndim != 2 or neg_emb.ndim != 3:
        raise ValueError("expected q: k x d, p: k x d, negatives: k x m x d")
    k, d = q_emb.shape
    if p_emb.shape != (k, d) or neg_emb.shape[0] != k or neg_emb.shape[2] != d:
        raise ValueError("tuple embedding shapes do not line up")
    m = neg_emb.shape[1]

    cands = concat([p_emb, neg_emb.reshape(k * m, d)], axis=0) if m else p_emb
    fwd = cosine_similarity_matrix(q_emb, cands) * (1.0 / tau)
    pos = (fwd[:, :k] * np.eye(k)).sum(axis=-1)
    loss = (fwd.logsumexp(axis=-1) - pos).mean()

    rev = cosine_similarity_matrix(p_emb, q_emb) * (1.0 / tau)
    diag = (rev * np.eye(k)).sum(axis=-1)
    return loss + (rev.logsumexp(axis=-1) - diag).mean()


def cosent_loss(scores: Tensor, zeta: Sequence[float], tau: float) -> Tensor:
    """log(1 + sum over comparable pairs of exp((s_j - s_i)/tau)).

    A pair (i, j) is comparable when zeta_i > zeta_j; an empty comparable
    set yields exactly zero.
    """
    tau = _check_tau(tau)
    if scores.ndim != 1:
        raise ValueError("scores must be a vector")
    z = np.asarray(zeta, dtype=np.float64)
    n = scores.shape[0]
    if z.shape != (n,) or n < 1:
        raise ValueError("zeta must match the score vector length (>= 1)")

    diffs = scores.reshape(1, n) - scores.reshape(n, 1)  # diffs[i, j] = s_j - s_i
    comparable = z[:, None] > z[None, :]
    terms = (diffs * (1.0 / tau)).masked_fill(~comparable, -1e9).reshape(n * n)
    return concat([terms, Tensor(np.zeros(1))], axis=0).logsumexp(axis=-1)


def separation_loss(embeddings: Tensor, labels: Sequence, tau: float) -> Tensor:
    """CoSent over all unordered pairs with label agreement as ground truth.

    Every same-label pair must outscore every cross-label pair.  Degenerate
    batches (no same-label or no cross-label pair) warn and return zero.
    """
    tau = _check_tau(tau)
    if embeddings.ndim != 2 or embeddings.shape[0] < 2:
        raise ValueError("separation_loss needs at least two embedded items")
    n = embeddings.shape[0]
    labels = list(labels)
    if len(labels) != n:
        raise ValueError("labels must match the embedding rows")

    ii, jj = np.triu_indices(n, k=1)
    zeta = np.asarray([1.0 if labels[i] == labels[j] else 0.0 for i, j in zip(ii, jj)])
    if not (zeta.any() and (zeta == 0.0).any()):
        warnings.warn("separation batch lacks a same-label or cross-label pair; loss is 0")
        return embeddings.sum() * 0.0

    sims = cosine_similarity_matrix(embeddings, embeddings)
    flat = gather_rows(sims.reshape(n * n, 1), ii * n + jj).reshape(len(ii))
    return cosent_loss(flat, zeta, tau)


def truncate_renormalize(emb: Tensor, dim: int) -> Tensor:
    """First ``dim`` coordinates of each row, rescaled to unit norm."""
    if not 1 <= dim <= emb.shape[-1]:
        raise ValueError(f"truncation dim {dim} outside [1, {emb.shape[-1]}]")
    return emb[..., :dim].l2_normalize()


def mrl_loss(
    loss_fn: Callable[..., Tensor],
    embeddings: Sequence[Tensor],
    dims: Sequence[int],
    weights: Sequence[float],
    allowed_dims: Sequence[int] | None = None,
) -> Tensor:
    """Weighted sum of ``loss_fn`` over truncated-and-renormalized embeddings.

    ``loss_fn`` receives one truncated tensor per entry of ``embeddings``;
    any labels or temperatures ride along in its closure.  dims = [full],
    weights = [1] degenerates to the plain loss.
    """
    dims = [int(d) for d in dims]
    weights = [float(w) for w in weights]
    if len(dims) != len(weights) or not dims:
        raise ValueError("dims and weights must be equal-length and non-empty")
    if any(w <= 0 for w in weights):
        raise ValueError("mrl weights must be positive")
    if allowed_dims is not None:
        bad = [d for d in dims if d not in set(allowed_dims)]
        if bad:
            raise ValueError(f"dims {bad} not in the configured mrl_dims")

    total = None
    for d, w in zip(dims, weights):
        term = loss_fn(*[truncate_renormalize(e, d) for e in embeddings]) * w
        total = term if total is None else total + term
    return total
