"""Three-stage training: masked-LM pre-training, pair fine-tuning, adapter tuning.

Stage I and II train the base weights (two sub-phases each, short then long
sequences with a reduced batch).  Stage III trains exactly one task's
adapter(s) with the base weights frozen; the freeze is verified by hashing
the base tensors before and after.  The optimizer is adaptive moment
estimation with decoupled weight decay; the schedule is linear warmup then
linear decay to zero.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import losses
from .data import (BatchSampler, DataError, LabeledRecord, PairRecord,
                   ScoredPairRecord, TupleRecord, append_unique_id)
from .encoder import EncoderModel, INSTRUCTION_PREFIXES, TaskKind, mean_pool, pad_token_batch
from .tensor import NumericError, Tensor

logger = logging.getLogger("taskemb")

DIVERGENCE_LIMIT = 1e6
TRAINABLE_TASKS = ("retrieval", "classification", "text-matching", "separation")


class TrainingError(Exception):
    """Stage-ordering violations and freezing-contract breaches."""


@dataclass(frozen=True)
class Phase:
    steps: int
    batch_size: int
    seq_len: int

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.seq_len < 1:
            raise ValueError("phase needs steps >= 0, batch_size >= 1, seq_len >= 1")


@dataclass
class StagePlan:
    stage: int
    phases: tuple[Phase, ...]
    max_lr: float
    warmup_steps: int
    tau: float | None = None
    task: str | None = None
    mrl_dims: tuple[int, ...] | None = None
    mrl_weights: tuple[float, ...] | None = None
    instructions: bool = False
    single_adapter: bool = False
    mix_pairs: bool = True
    long_min_tokens: int | None = None

    def __post_init__(self):
        self.phases = tuple(self.phases)
        if self.stage not in (1, 2, 3):
            raise ValueError("stage must be 1, 2 or 3")
        if self.stage in (1, 2):
            if len(self.phases) != 2:
                raise ValueError("stages I and II need exactly two sub-phases (short, long)")
            short, long = self.phases
            if long.seq_len <= short.seq_len:
                raise ValueError("the long sub-phase must use a longer sequence length")
            if long.batch_size > short.batch_size:
                raise ValueError("the long sub-phase must not grow the batch size")
            if self.task is not None:
                raise ValueError("only stage III binds a task")
        else:
            if len(self.phases) != 1:
                raise ValueError("stage III uses a single phase")
            if self.task not in TRAINABLE_TASKS:
                raise ValueError(f"stage III task must be one of {TRAINABLE_TASKS}")
        if self.max_lr < 0:
            raise ValueError("max_lr must be non-negative")
        total = self.total_steps
        if total > 0 and not 0 < self.warmup_steps < total:
            raise ValueError("need 0 < warmup_steps < total steps")
        if (self.mrl_dims is None) != (self.mrl_weights is None):
            raise ValueError("mrl_dims and mrl_weights come together")
        if self.mrl_dims is not None:
            self.mrl_dims = tuple(int(d) for d in self.mrl_dims)
            self.mrl_weights = tuple(float(w) for w in self.mrl_weights)
            if len(self.mrl_dims) != len(self.mrl_weights):
                raise ValueError("mrl_dims and mrl_weights must have equal length")

    @property
    def total_steps(self) -> int:
        return sum(p.steps for p in self.phases)

    @classmethod
    def from_json(cls, payload: dict) -> "StagePlan":
        known = {"stage", "phases", "max_lr", "warmup_steps", "tau", "task", "mrl_dims",
                 "mrl_weights", "instructions", "single_adapter", "mix_pairs", "long_min_tokens"}
        kwargs = {k: v for k, v in payload.items() if k in known}
        kwargs["phases"] = tuple(Phase(**p) for p in payload["phases"])
        return cls(**kwargs)


def lr_schedule(step: int, warmup: int, total: int, max_lr: float) -> float:
    """Linear 0 -> max_lr over ``warmup`` steps, then linear max_lr -> 0 at ``total``."""
    if not 0 < warmup < total:
        raise ValueError("need 0 < warmup < total")
    if step < 0 or step > total:
        raise ValueError("step outside [0, total]")
    if step <= warmup:
        return max_lr * step / warmup
    return max_lr * (total - step) / (total - warmup)


class Adam:
    """Adaptive moment estimation with decoupled weight decay.

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta).
    Moments exist only for the parameters handed in; a non-finite gradient
    aborts the step before any parameter is touched.
    """

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = dict(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.step_count = 0

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float) -> None:
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        for name, p in self.params.items():
            if p.grad is None or not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient for {name!r}; step aborted")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            g = p.grad
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1 ** t)
            v_hat = self.v[name] / (1 - b2 ** t)
            p.data -= lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.data)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"opt/{name}/m"] = self.m[name]
            out[f"opt/{name}/v"] = self.v[name]
        return out


# -- shared step machinery ----------------------------------------------


def _check_loss(loss: Tensor, step: int) -> float:
    value = loss.item()
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss at step {step}")
    if value > DIVERGENCE_LIMIT:
        raise NumericError(f"training diverged at step {step}: loss {value:.3e} > {DIVERGENCE_LIMIT:.0e}")
    return value


def _guard_adapter_grads(model: EncoderModel) -> None:
    for task, adapter in model.adapters.items():
        for key, (a, b) in adapter.tensors.items():
            if (a.grad is not None and np.any(a.grad)) or (b.grad is not None and np.any(b.grad)):
                raise TrainingError(
                    f"adapter parameters received gradients during base training "
                    f"({task.value}/{key})")


def _pooled(model: EncoderModel, texts: Sequence[str], task: TaskKind, seq_len: int,
            rope_base: float, prefix: str = "") -> Tensor:
    vocab = model.vocab
    tokens = [vocab.tokenize(prefix + t) for t in texts]
    ids, mask = pad_token_batch(tokens, seq_len, vocab.pad_id)
    return model.encode_tokens(ids, mask, task=task, rope_base=rope_base)


def _maybe_mrl(plan: StagePlan, model: EncoderModel, loss_fn, embeddings: Sequence[Tensor]) -> Tensor:
    if plan.mrl_dims is None:
        return loss_fn(*embeddings)
    return losses.mrl_loss(loss_fn, embeddings, plan.mrl_dims, plan.mrl_weights,
                           allowed_dims=model.config.mrl_dims)


# -- stage I: masked-LM pre-training --------------------------------------


def run_stage1(
    model: EncoderModel,
    corpus: Sequence[str],
    plan: StagePlan,
    mask_ratio: float = 0.15,
    on_step: Callable[[int, float], None] | None = None,
) -> EncoderModel:
    """Whole-word-masked LM training of the base weights (no adapters, no pooling)."""
    from .tokenizer import whole_word_mask

    if plan.stage != 1:
        raise ValueError("run_stage1 needs a stage-1 plan")
    if model.vocab is None:
        raise TrainingError("attach a vocabulary before pre-training")
    corpus = [t for t in corpus if t.strip()]
    if not corpus:
        raise DataError("pre-training corpus is empty")

    rng = np.random.default_rng([model.config.seed, 11])
    opt = Adam(model.base_parameters())
    rope = model.config.rope_base_train
    total, step = plan.total_steps, 0
    for phase in plan.phases:
        for _ in range(phase.steps):
            picks = rng.integers(0, len(corpus), size=phase.batch_size)
            batch_tokens = [model.vocab.tokenize(corpus[int(i)])[:phase.seq_len] for i in picks]
            corrupted, targets, flags = [], [], []
            any_masked = False
            for seq in batch_tokens:
                c, t, f = whole_word_mask(seq, mask_ratio, rng, model.vocab)
                corrupted.append(c)
                targets.append(t)
                flags.append(f)
                any_masked = any_masked or any(f)
            if not any_masked:  # rare at sane ratios; draw fresh corruption
                continue
            ids, mask = pad_token_batch(corrupted, phase.seq_len, model.vocab.pad_id)
            width = ids.shape[1]
            tgt = np.zeros_like(ids)
            sel = np.zeros(ids.shape, dtype=bool)
            for r, (t, f) in enumerate(zip(targets, flags)):
                tgt[r, :len(t)] = t
                sel[r, :len(f)] = f

            states = model.forward(ids, mask, task=TaskKind.NONE, rope_base=rope)
            loss = losses.mlm_loss(model.mlm_logits(states), tgt, sel)
            value = _check_loss(loss, step)
            opt.zero_grads()
            loss.backward()
            _guard_adapter_grads(model)
            opt.step(lr_schedule(step, plan.warmup_steps, total, plan.max_lr))
            if on_step:
                on_step(step, value)
            step += 1
    model.stages_completed.add(1)
    return model


# -- stage II: pair fine-tuning --------------------------------------------


def _filter_long_datasets(model, datasets, batch_size, min_tokens):
    """Keep datasets whose median pair length reaches the token threshold."""
    kept = {}
    for name, records in datasets.items():
        lengths = [len(model.vocab.tokenize(r.q)) + len(model.vocab.tokenize(r.p))
                   for r in records]
        if lengths and float(np.median(lengths)) >= min_tokens:
            kept[name] = records
    if not kept:
        logger.warning("no pair dataset meets the long-text threshold; using all")
        return dict(datasets)
    return kept


def run_stage2(
    model: EncoderModel,
    pair_datasets: dict[str, Sequence[PairRecord]],
    plan: StagePlan,
    on_step: Callable[[int, float], None] | None = None,
) -> EncoderModel:
    """Bidirectional pair InfoNCE over homogeneous batches, base weights only."""
    if plan.stage != 2:
        raise ValueError("run_stage2 needs a stage-2 plan")
    if model.vocab is None:
        raise TrainingError("attach a vocabulary before pair training")
    tau = plan.tau if plan.tau is not None else losses.DEFAULT_TEMPERATURES["pairs"]
    opt = Adam(model.base_parameters())
    rope = model.config.rope_base_train
    total, step = plan.total_steps, 0
    for phase_idx, phase in enumerate(plan.phases):
        datasets = pair_datasets
        if phase_idx == 1 and plan.long_min_tokens is not None:
            datasets = _filter_long_datasets(model, pair_datasets, phase.batch_size,
                                             plan.long_min_tokens)
        if phase.steps == 0:
            continue
        sampler = BatchSampler(datasets, phase.batch_size,
                               np.random.default_rng([model.config.seed, 21, phase_idx]))
        for _ in range(phase.steps):
            _, records = sampler.next_batch()
            q_emb = _pooled(model, [r.q for r in records], TaskKind.NONE, phase.seq_len, rope)
            p_emb = _pooled(model, [r.p for r in records], TaskKind.NONE, phase.seq_len, rope)
            loss = _maybe_mrl(plan, model,
                              lambda qe, pe: losses.pair_loss_bidirectional(qe, pe, tau),
                              (q_emb, p_emb))
            value = _check_loss(loss, step)
            opt.zero_grads()
            loss.backward()
            _guard_adapter_grads(model)
            opt.step(lr_schedule(step, plan.warmup_steps, total, plan.max_lr))
            if on_step:
                on_step(step, value)
            step += 1
    model.stages_completed.add(2)
    return model


# -- stage III: task adapters ----------------------------------------------


def _stage3_tasks(plan: StagePlan) -> list[TaskKind]:
    if plan.task == "retrieval":
        if plan.single_adapter:
            return [TaskKind.RETRIEVAL_QUERY]
        return [TaskKind.RETRIEVAL_QUERY, TaskKind.RETRIEVAL_PASSAGE]
    return [TaskKind.parse(plan.task)]


def run_stage3(
    model: EncoderModel,
    task: str,
    datasets: dict[str, Sequence],
    plan: StagePlan,
    pair_datasets: dict[str, Sequence[PairRecord]] | None = None,
    on_step: Callable[[int, float], None] | None = None,
) -> EncoderModel:
    """Train one task's adapter(s); base weights are frozen and hash-verified.

    Losses per task: classification uses the multi-negative InfoNCE on
    unique-id-tagged 9-tuples; text-matching uses CoSent on graded pairs;
    retrieval trains the query and passage adapters jointly in one graph;
    separation ranks same-label pairs above cross-label ones, optionally
    alternating with plain pair batches.
    """
    if plan.stage != 3 or plan.task != task:
        raise ValueError("run_stage3 needs a matching stage-3 plan")
    if task not in TRAINABLE_TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TRAINABLE_TASKS}")
    if 2 not in model.stages_completed:
        raise TrainingError("stage III requires a model that completed stage II")
    if model.vocab is None:
        raise TrainingError("attach a vocabulary before adapter training")

    tasks = _stage3_tasks(plan)
    for t in tasks:
        model.add_adapter(t)
    adapter_params: dict[str, Tensor] = {}
    for t in tasks:
        adapter_params.update(model.adapter_parameters(t))
    all_params = list(model.base_parameters().values())
    for adapter in model.adapters.values():
        for a, b in adapter.tensors.values():
            all_params.extend((a, b))

    base_hash = model.base_weights_hash()
    tau_default = losses.DEFAULT_TEMPERATURES[task]
    tau = plan.tau if plan.tau is not None else tau_default
    opt = Adam(adapter_params)
    rope = model.config.rope_base_train
    phase = plan.phases[0]
    total = plan.total_steps

    rng = np.random.default_rng([model.config.seed, 31])
    sampler = BatchSampler(datasets, phase.batch_size, rng) if phase.steps else None
    pair_sampler = None
    if task == "separation" and plan.mix_pairs and pair_datasets:
        pair_sampler = BatchSampler(pair_datasets, phase.batch_size,
                                    np.random.default_rng([model.config.seed, 32]))

    q_prefix = INSTRUCTION_PREFIXES[TaskKind.RETRIEVAL_QUERY] if plan.instructions else ""
    p_prefix = INSTRUCTION_PREFIXES[TaskKind.RETRIEVAL_PASSAGE] if plan.instructions else ""

    for step in range(phase.steps):
        if task == "classification":
            _, records = sampler.next_batch()
            _require_tuple_batch(records, exact_m=7)
            records = [append_unique_id(r, f"uid{i}") for i, r in enumerate(records)]
            loss = _tuple_loss(model, records, plan, TaskKind.CLASSIFICATION,
                               TaskKind.CLASSIFICATION, phase.seq_len, rope, tau)
        elif task == "retrieval":
            _, records = sampler.next_batch()
            _require_tuple_batch(records)
            q_task = TaskKind.RETRIEVAL_QUERY
            p_task = tasks[-1]  # passage adapter, or the single shared adapter
            loss = _tuple_loss(model, records, plan, q_task, p_task, phase.seq_len, rope, tau,
                               q_prefix=q_prefix, p_prefix=p_prefix)
        elif task == "text-matching":
            _, records = sampler.next_batch()
            if not all(isinstance(r, ScoredPairRecord) for r in records):
                raise DataError("text-matching training needs scored pair records")
            zeta = [r.zeta for r in records]

            def scored_loss(qe: Tensor, pe: Tensor) -> Tensor:
                scores = (qe.l2_normalize() * pe.l2_normalize()).sum(axis=-1)
                return losses.cosent_loss(scores, zeta, tau)

            q_emb = _pooled(model, [r.q for r in records], TaskKind.TEXT_MATCHING,
                            phase.seq_len, rope)
            p_emb = _pooled(model, [r.p for r in records], TaskKind.TEXT_MATCHING,
                            phase.seq_len, rope)
            loss = _maybe_mrl(plan, model, scored_loss, (q_emb, p_emb))
        else:  # separation
            use_pairs = pair_sampler is not None and step % 2 == 1
            if use_pairs:
                _, records = pair_sampler.next_batch()
                q_emb = _pooled(model, [r.q for r in records], TaskKind.SEPARATION,
                                phase.seq_len, rope)
                p_emb = _pooled(model, [r.p for r in records], TaskKind.SEPARATION,
                                phase.seq_len, rope)
                loss = _maybe_mrl(plan, model,
                                  lambda qe, pe: losses.pair_loss_bidirectional(qe, pe, tau),
                                  (q_emb, p_emb))
            else:
                _, records = sampler.next_batch()
                if not all(isinstance(r, LabeledRecord) for r in records):
                    raise DataError("separation training needs labeled records")
                labels = [r.label for r in records]
                emb = _pooled(model, [r.text for r in records], TaskKind.SEPARATION,
                              phase.seq_len, rope)
                loss = _maybe_mrl(plan, model,
                                  lambda e: losses.separation_loss(e, labels, tau), (emb,))

        if not loss.grad_enabled:  # degenerate separation batch: nothing to learn
            if on_step:
                on_step(step, loss.item())
            continue
        value = _check_loss(loss, step)
        opt.zero_grads()
        for p in all_params:
            p.zero_grad()
        loss.backward()
        opt.step(lr_schedule(step, plan.warmup_steps, total, plan.max_lr))
        if on_step:
            on_step(step, value)

    if model.base_weights_hash() != base_hash:
        raise TrainingError("base weights drifted during adapter training")
    model.stages_completed.add(3)
    return model


def _require_tuple_batch(records: Sequence, exact_m: int | None = None) -> None:
    if not all(isinstance(r, TupleRecord) for r in records):
        raise DataError("this task trains on tuple records")
    ms = {r.m for r in records}
    if len(ms) > 1:
        raise DataError(f"negative counts differ within one batch: {sorted(ms)}")
    if exact_m is not None and ms != {exact_m}:
        raise DataError(f"classification tuples need exactly {exact_m} negatives")


def _tuple_loss(
    model: EncoderModel,
    records: Sequence[TupleRecord],
    plan: StagePlan,
    q_task: TaskKind,
    p_task: TaskKind,
    seq_len: int,
    rope: float,
    tau: float,
    q_prefix: str = "",
    p_prefix: str = "",
) -> Tensor:
    k = len(records)
    m = records[0].m
    q_emb = _pooled(model, [r.q for r in records], q_task, seq_len, rope, prefix=q_prefix)
    p_emb = _pooled(model, [r.p for r in records], p_task, seq_len, rope, prefix=p_prefix)
    if m:
        neg_texts = [n for r in records for n in r.negatives]
        n_emb = _pooled(model, neg_texts, p_task, seq_len, rope, prefix=p_prefix)
        n_emb = n_emb.reshape(k, m, model.config.d_model)
    else:
        n_emb = Tensor(np.zeros((k, 0, model.config.d_model)))

    def tuple_fn(qe: Tensor, pe: Tensor, ne: Tensor) -> Tensor:
        return losses.triplet_loss(qe, pe, ne, tau)

    return _maybe_mrl(plan, model, tuple_fn, (q_emb, p_emb, n_emb))
