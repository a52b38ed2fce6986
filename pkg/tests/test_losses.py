"""Losses against independent direct-summation oracles plus analytic anchors.

The oracles below are deliberately written with plain Python loops and
math.exp/log so they share no code with the graph implementations.
"""

import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from taskemb.losses import (cosent_loss, info_nce, mlm_loss, mrl_loss,
                            pair_loss_bidirectional, separation_loss,
                            triplet_loss, truncate_renormalize)
from taskemb.tensor import Tensor, grad_check

# -- oracles -------------------------------------------------------------


def o_cos(u, v):
    nu = math.sqrt(sum(x * x for x in u))
    nv = math.sqrt(sum(x * x for x in v))
    return sum(a * b for a, b in zip(u, v)) / (nu * nv)


def o_info_nce(sim, tau):
    total = 0.0
    k = len(sim)
    for i in range(k):
        denom = sum(math.exp(sim[i][j] / tau) for j in range(k))
        total += -math.log(math.exp(sim[i][i] / tau) / denom)
    return total


def o_pair(q, p, tau):
    k = len(q)
    s = [[o_cos(q[i], p[j]) for j in range(k)] for i in range(k)]
    st_ = [[s[j][i] for j in range(k)] for i in range(k)]
    return o_info_nce(s, tau) + o_info_nce(st_, tau)


def o_triplet(q, p, negs, tau):
    k, m = len(q), len(negs[0]) if negs else 0
    fwd = 0.0
    for t in range(k):
        denom = 0.0
        for i in range(k):
            denom += math.exp(o_cos(q[t], p[i]) / tau)
            for j in range(m):
                denom += math.exp(o_cos(q[t], negs[i][j]) / tau)
        fwd += -math.log(math.exp(o_cos(q[t], p[t]) / tau) / denom)
    rev = 0.0
    for t in range(k):
        denom = sum(math.exp(o_cos(p[t], q[i]) / tau) for i in range(k))
        rev += -math.log(math.exp(o_cos(p[t], q[t]) / tau) / denom)
    return fwd / k + rev / k


def o_cosent(scores, zeta, tau):
    acc = 0.0
    for i in range(len(scores)):
        for j in range(len(scores)):
            if zeta[i] > zeta[j]:
                acc += math.exp((scores[j] - scores[i]) / tau)
    return math.log(1.0 + acc)


def o_separation(emb, labels, tau):
    scores, zeta = [], []
    n = len(emb)
    for i in range(n):
        for j in range(i + 1, n):
            scores.append(o_cos(emb[i], emb[j]))
            zeta.append(1.0 if labels[i] == labels[j] else 0.0)
    return o_cosent(scores, zeta, tau)


def o_mlm(logits, targets, positions):
    losses = []
    for (b, l) in positions:
        row = logits[b][l]
        mx = max(row)
        denom = sum(math.exp(v - mx) for v in row)
        losses.append(-(row[targets[b][l]] - mx - math.log(denom)))
    return sum(losses) / len(losses)


def o_truncate(rows, dim):
    out = []
    for r in rows:
        head = r[:dim]
        norm = math.sqrt(sum(x * x for x in head))
        out.append([x / norm for x in head])
    return out


# -- info_nce ------------------------------------------------------------


def test_info_nce_k1_is_zero():
    assert info_nce(Tensor([[0.37]]), tau=0.05).item() == pytest.approx(0.0, abs=1e-15)


def test_info_nce_uniform_k2_is_2ln2():
    loss = info_nce(Tensor([[0.3, 0.3], [0.3, 0.3]]), tau=1.0).item()
    assert loss == pytest.approx(2 * math.log(2), abs=1e-12)


def test_info_nce_identity_anchor():
    loss = info_nce(Tensor([[1.0, 0.0], [0.0, 1.0]]), tau=1.0).item()
    assert loss == pytest.approx(2 * math.log(1 + math.exp(-1)), abs=1e-12)
    assert loss == pytest.approx(0.6265, abs=5e-5)


def test_info_nce_oracle_100_batches():
    for trial in range(100):
        r = np.random.default_rng(trial)
        k = int(r.integers(1, 6))
        sim = r.uniform(-1, 1, size=(k, k))
        got = info_nce(Tensor(sim), tau=0.5).item()
        assert got == pytest.approx(o_info_nce(sim.tolist(), 0.5), abs=1e-10)


def test_info_nce_shift_invariance(rng):
    sim = rng.uniform(-1, 1, size=(5, 5))
    base = info_nce(Tensor(sim), tau=0.2).item()
    shifted = info_nce(Tensor(sim + rng.normal(size=(5, 1))), tau=0.2).item()
    assert shifted == pytest.approx(base, abs=1e-10)


def test_info_nce_rejects_non_square():
    with pytest.raises(ValueError):
        info_nce(Tensor(np.zeros((2, 3))), tau=1.0)


def test_info_nce_rejects_bad_tau():
    with pytest.raises(ValueError):
        info_nce(Tensor(np.zeros((2, 2))), tau=0.0)


# -- pair loss -------------------------------------------------------------


def test_pair_loss_k1_is_zero(rng):
    q = Tensor(rng.normal(size=(1, 4)))
    p = Tensor(rng.normal(size=(1, 4)))
    assert pair_loss_bidirectional(q, p, tau=0.05).item() == pytest.approx(0.0, abs=1e-12)


def test_pair_loss_symmetric_anchor(rng):
    # identical q and p give a symmetric matrix, so the two directions agree
    q = rng.normal(size=(3, 4))
    sym = pair_loss_bidirectional(Tensor(q), Tensor(q.copy()), tau=0.1).item()
    s = Tensor(q).l2_normalize() @ Tensor(q.copy()).l2_normalize().transpose()
    assert sym == pytest.approx(2 * info_nce(s, tau=0.1).item(), abs=1e-10)


def test_pair_loss_oracle_100_batches():
    for trial in range(100):
        r = np.random.default_rng(1000 + trial)
        k, d = int(r.integers(1, 5)), int(r.integers(2, 6))
        q, p = r.normal(size=(k, d)), r.normal(size=(k, d))
        got = pair_loss_bidirectional(Tensor(q), Tensor(p), tau=0.3).item()
        assert got == pytest.approx(o_pair(q.tolist(), p.tolist(), 0.3), abs=1e-10)


def test_pair_loss_row_mismatch():
    with pytest.raises(ValueError):
        pair_loss_bidirectional(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3))), tau=0.1)


# -- triplet loss -----------------------------------------------------------


def test_triplet_m0_matches_pair_loss_per_tuple(rng):
    k, d = 4, 5
    q, p = rng.normal(size=(k, d)), rng.normal(size=(k, d))
    trip = triplet_loss(Tensor(q), Tensor(p), Tensor(np.zeros((k, 0, d))), tau=0.2).item()
    pair = pair_loss_bidirectional(Tensor(q), Tensor(p), tau=0.2).item()
    assert trip == pytest.approx(pair / k, abs=1e-10)


def test_triplet_hand_anchor():
    # one tuple, one negative, all similarities zero: ln 2 forward, 0 reverse
    q = Tensor([[1.0, 0.0, 0.0]])
    p = Tensor([[0.0, 1.0, 0.0]])
    n = Tensor([[[0.0, 0.0, 1.0]]])
    assert triplet_loss(q, p, n, tau=1.0).item() == pytest.approx(math.log(2), abs=1e-12)
    assert triplet_loss(q, p, n, tau=1.0).item() == pytest.approx(0.6931, abs=5e-5)


def test_triplet_oracle_k3_m7():
    for trial in range(25):
        r = np.random.default_rng(2000 + trial)
        k, m, d = 3, 7, 4
        q, p = r.normal(size=(k, d)), r.normal(size=(k, d))
        negs = r.normal(size=(k, m, d))
        got = triplet_loss(Tensor(q), Tensor(p), Tensor(negs), tau=0.4).item()
        want = o_triplet(q.tolist(), p.tolist(), negs.tolist(), 0.4)
        assert got == pytest.approx(want, abs=1e-10)


def test_triplet_decreases_when_positive_similarity_rises():
    d = 4
    base = np.eye(1, d)[0]
    p_near = base * 0.9 + 0.1
    q = Tensor([base])
    n = Tensor([[np.roll(base, 1)]])
    lo = triplet_loss(q, Tensor([p_near]), n, tau=0.5).item()
    hi = triplet_loss(q, Tensor([np.roll(base, 2)]), n, tau=0.5).item()
    assert lo < hi


# -- cosent ------------------------------------------------------------------


def test_cosent_all_equal_zeta_is_zero(rng):
    scores = Tensor(rng.uniform(-1, 1, size=5))
    assert cosent_loss(scores, [1.0] * 5, tau=0.05).item() == pytest.approx(0.0, abs=1e-12)


def test_cosent_single_zero_margin_is_ln2():
    loss = cosent_loss(Tensor([0.4, 0.4]), [1.0, 0.0], tau=1.0).item()
    assert loss == pytest.approx(math.log(2), abs=1e-12)


def test_cosent_oracle_100_batches():
    for trial in range(100):
        r = np.random.default_rng(3000 + trial)
        n = int(r.integers(1, 8))
        scores = r.uniform(-1, 1, size=n)
        zeta = r.choice([0.0, 0.5, 1.0], size=n)
        got = cosent_loss(Tensor(scores), zeta.tolist(), tau=0.05).item()
        assert got == pytest.approx(o_cosent(scores.tolist(), zeta.tolist(), 0.05), abs=1e-10)


def test_cosent_monotone_in_high_zeta_score():
    zeta = [1.0, 0.0, 0.0]
    base = np.array([0.1, 0.3, -0.2])
    losses = []
    for bump in (0.0, 0.2, 0.4):
        s = base.copy()
        s[0] += bump
        losses.append(cosent_loss(Tensor(s), zeta, tau=0.3).item())
    assert losses[0] > losses[1] > losses[2]


# -- separation ----------------------------------------------------------------


def test_separation_all_same_label_zero_with_warning(rng):
    emb = Tensor(rng.normal(size=(3, 4)))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        loss = separation_loss(emb, ["a", "a", "a"], tau=1.0)
    assert loss.item() == 0.0
    assert any("separation" in str(w.message) for w in caught)


def test_separation_two_cluster_anchor():
    # two clusters of two: within cosine 1, across cosine -1
    u = [1.0, 0.0]
    emb = Tensor([u, u, [-1.0, 0.0], [-1.0, 0.0]])
    loss = separation_loss(emb, [0, 0, 1, 1], tau=1.0).item()
    # 2 same-label pairs vs 4 cross-label pairs -> 8 comparable pairs,
    # each contributing exp((-1 - 1)/1)
    assert loss == pytest.approx(math.log(1 + 8 * math.exp(-2)), abs=1e-12)


def test_separation_oracle_random_batches():
    for trial in range(50):
        r = np.random.default_rng(4000 + trial)
        n, d = int(r.integers(3, 8)), 4
        emb = r.normal(size=(n, d))
        labels = r.integers(0, 3, size=n).tolist()
        if len(set(labels)) < 2 or all(labels.count(x) < 2 for x in labels):
            continue
        got = separation_loss(Tensor(emb), labels, tau=0.7).item()
        assert got == pytest.approx(o_separation(emb.tolist(), labels, 0.7), abs=1e-10)


def test_separation_approaches_zero_when_separated():
    u, v = [1.0, 0.0], [0.0, 1.0]
    tight = Tensor([u, u, [-1.0, 0.0], [-1.0, 0.0]])
    loose = Tensor([u, v, [0.5, 0.5], [-0.5, 0.5]])
    assert (separation_loss(tight, [0, 0, 1, 1], tau=0.5).item()
            < separation_loss(loose, [0, 0, 1, 1], tau=0.5).item())


# -- MLM -----------------------------------------------------------------------


def test_mlm_uniform_logits_ln_vocab():
    logits = Tensor(np.zeros((1, 3, 8)))
    targets = np.zeros((1, 3), dtype=int)
    mask = np.array([[True, False, True]])
    assert mlm_loss(logits, targets, mask).item() == pytest.approx(math.log(8), abs=1e-12)
    assert mlm_loss(logits, targets, mask).item() == pytest.approx(2.0794, abs=5e-5)


def test_mlm_sharp_logits_approach_zero():
    logits = np.full((1, 2, 6), -30.0)
    targets = np.array([[2, 4]])
    logits[0, 0, 2] = 30.0
    logits[0, 1, 4] = 30.0
    mask = np.array([[True, True]])
    assert mlm_loss(Tensor(logits), targets, mask).item() < 1e-12


def test_mlm_oracle_random_cases():
    for trial in range(100):
        r = np.random.default_rng(5000 + trial)
        b, l, v = 2, 4, int(r.integers(3, 9))
        logits = r.normal(size=(b, l, v)) * 3
        targets = r.integers(0, v, size=(b, l))
        mask = r.random(size=(b, l)) < 0.5
        if not mask.any():
            mask[0, 0] = True
        got = mlm_loss(Tensor(logits), targets, mask).item()
        pos = [(i, j) for i in range(b) for j in range(l) if mask[i, j]]
        want = o_mlm(logits.tolist(), targets.tolist(), pos)
        assert got == pytest.approx(want, abs=1e-10)


def test_mlm_requires_masked_positions():
    with pytest.raises(ValueError):
        mlm_loss(Tensor(np.zeros((1, 2, 4))), np.zeros((1, 2), dtype=int),
                 np.zeros((1, 2), dtype=bool))


# -- MRL wrapper ------------------------------------------------------------------


def test_mrl_degenerate_equals_plain(rng):
    q, p = Tensor(rng.normal(size=(3, 8))), Tensor(rng.normal(size=(3, 8)))
    fn = lambda a, b: pair_loss_bidirectional(a, b, tau=0.2)
    plain = fn(q, p).item()
    wrapped = mrl_loss(fn, (q, p), dims=[8], weights=[1.0]).item()
    assert wrapped == pytest.approx(plain, rel=1e-12)


def test_mrl_split_weights_equal_plain(rng):
    q, p = Tensor(rng.normal(size=(3, 8))), Tensor(rng.normal(size=(3, 8)))
    fn = lambda a, b: pair_loss_bidirectional(a, b, tau=0.2)
    wrapped = mrl_loss(fn, (q, p), dims=[8, 8], weights=[0.5, 0.5]).item()
    assert wrapped == pytest.approx(fn(q, p).item(), rel=1e-12)


def test_mrl_sums_independent_truncations(rng):
    q, p = rng.normal(size=(4, 32)), rng.normal(size=(4, 32))
    fn = lambda a, b: pair_loss_bidirectional(a, b, tau=0.1)
    whole = mrl_loss(fn, (Tensor(q), Tensor(p)), dims=[8, 32], weights=[1.0, 1.0]).item()
    part8 = fn(Tensor(o_truncate(q.tolist(), 8)), Tensor(o_truncate(p.tolist(), 8))).item()
    part32 = fn(Tensor(o_truncate(q.tolist(), 32)), Tensor(o_truncate(p.tolist(), 32))).item()
    assert whole == pytest.approx(part8 + part32, abs=1e-10)


def test_mrl_rejects_disallowed_dim(rng):
    q = Tensor(rng.normal(size=(2, 8)))
    with pytest.raises(ValueError):
        mrl_loss(lambda a: a.sum(), (q,), dims=[5], weights=[1.0], allowed_dims=[4, 8])


def test_mrl_uniform_weight_bounds(rng):
    q, p = Tensor(rng.normal(size=(4, 16))), Tensor(rng.normal(size=(4, 16)))
    fn = lambda a, b: pair_loss_bidirectional(a, b, tau=0.2)
    dims = [4, 8, 16]
    per_dim = [mrl_loss(fn, (q, p), dims=[d], weights=[1.0]).item() for d in dims]
    total = mrl_loss(fn, (q, p), dims=dims, weights=[1.0] * 3).item()
    assert total >= min(per_dim) - 1e-12
    assert total <= max(per_dim) * 3 + 1e-12


# -- gradient checks for every loss ------------------------------------------------


def test_all_losses_grad_check():
    r = np.random.default_rng(99)
    for trial in range(10):
        k, m, d = 3, 2, 5
        flat = r.normal(size=(k * (2 + m), d))

        def pair_fn(x):
            return pair_loss_bidirectional(x[:k], x[k:2 * k], tau=0.5)

        def triplet_fn(x):
            return triplet_loss(x[:k], x[k:2 * k], x[2 * k:].reshape(k, m, d), tau=0.5)

        def cosent_fn(x):
            scores = (x[:k].l2_normalize() * x[k:2 * k].l2_normalize()).sum(axis=-1)
            return cosent_loss(scores, [1.0, 0.5, 0.0], tau=0.5)

        def sep_fn(x):
            return separation_loss(x, [0, 0, 1, 1, 1, 2, 2, 0, 1, 2][: x.shape[0]], tau=0.5)

        def mrl_fn(x):
            return mrl_loss(lambda a, b: pair_loss_bidirectional(a, b, tau=0.5),
                            (x[:k], x[k:2 * k]), dims=[2, d], weights=[0.5, 0.5])

        assert grad_check(pair_fn, Tensor(flat.copy())) < 1e-4
        assert grad_check(triplet_fn, Tensor(flat.copy())) < 1e-4
        assert grad_check(cosent_fn, Tensor(flat.copy())) < 1e-4
        assert grad_check(sep_fn, Tensor(flat[:6].copy())) < 1e-4
        assert grad_check(mrl_fn, Tensor(flat.copy())) < 1e-4

        logits = r.normal(size=(2, 3, 6)) * 2
        targets = r.integers(0, 6, size=(2, 3))
        mask = np.array([[True, False, True], [False, True, False]])

        def mlm_fn(x):
            return mlm_loss(x, targets, mask)

        assert grad_check(mlm_fn, Tensor(logits)) < 1e-4
