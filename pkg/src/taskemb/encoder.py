"""Toy transformer encoder with rotary attention and task-routed adapters.

Pre-norm stack, GELU feed-forward, naive O(len^2) attention.  The token
embedding and the four attention projections of every layer carry optional
low-rank adapters (one set per task) that start as exact identities
(B = 0).  Mean pooling over unmasked positions produces the sentence
embedding; inference can truncate to any configured dimension and
renormalize.  The rotary base frequency is a call-time parameter: low
during training, raised at inference.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .tensor import Tensor, concat, gather_rows, layer_norm, no_grad
from .tokenizer import Vocab


class TaskKind(Enum):
    """The five adapter identities plus the adapter-free base model."""

    RETRIEVAL_QUERY = "retrieval.query"
    RETRIEVAL_PASSAGE = "retrieval.passage"
    SEPARATION = "separation"
    CLASSIFICATION = "classification"
    TEXT_MATCHING = "text-matching"
    NONE = "none"

    @classmethod
    def parse(cls, value: str) -> "TaskKind":
        for member in cls:
            if member.value == value:
                return member
        valid = ", ".join(m.value for m in cls)
        raise ValueError(f"unknown task {value!r}; valid tasks: {valid}")


ADAPTER_TASKS = (
    TaskKind.RETRIEVAL_QUERY,
    TaskKind.RETRIEVAL_PASSAGE,
    TaskKind.SEPARATION,
    TaskKind.CLASSIFICATION,
    TaskKind.TEXT_MATCHING,
)

# Instruction prefixes for asymmetric retrieval (prepended before tokenization).
INSTRUCTION_PREFIXES = {
    TaskKind.RETRIEVAL_QUERY: "query: ",
    TaskKind.RETRIEVAL_PASSAGE: "passage: ",
}


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int
    n_layers: int
    n_heads: int
    d_ff: int
    max_seq_len: int = 128
    rope_base_train: float = 10_000.0
    rope_base_infer: float = 20_000.0
    lora_rank: int = 4
    lora_alpha: float = 4.0
    mrl_dims: tuple[int, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if (self.d_model // self.n_heads) % 2 != 0:
            raise ValueError("head dimension must be even (rotary pairs)")
        if self.lora_rank < 1:
            raise ValueError("lora_rank must be >= 1")
        if self.rope_base_train <= 0 or self.rope_base_infer <= 0:
            raise ValueError("rotary bases must be positive")
        if self.mrl_dims is None:
            self.mrl_dims = (self.d_model,)
        self.mrl_dims = tuple(int(d) for d in self.mrl_dims)
        if any(not 1 <= d <= self.d_model for d in self.mrl_dims):
            raise ValueError("every mrl dim must lie in [1, d_model]")
        if list(self.mrl_dims) != sorted(set(self.mrl_dims)):
            raise ValueError("mrl_dims must be strictly ascending")
        if self.mrl_dims[-1] != self.d_model:
            raise ValueError("the last mrl dim must equal d_model")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def lora_scale(self) -> float:
        return self.lora_alpha / self.lora_rank

    def to_json(self) -> dict:
        return {
            "vocab_size": self.vocab_size, "d_model": self.d_model,
            "n_layers": self.n_layers, "n_heads": self.n_heads, "d_ff": self.d_ff,
            "max_seq_len": self.max_seq_len, "rope_base_train": self.rope_base_train,
            "rope_base_infer": self.rope_base_infer, "lora_rank": self.lora_rank,
            "lora_alpha": self.lora_alpha, "mrl_dims": list(self.mrl_dims),
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "ModelConfig":
        payload = dict(payload)
        dims = payload.get("mrl_dims")
        payload["mrl_dims"] = tuple(dims) if dims else None
        return cls(**payload)


def apply_rope(
    q: Tensor, k: Tensor, base: float, positions: np.ndarray | None = None
) -> tuple[Tensor, Tensor]:
    """Rotate (2i, 2i+1) dimension pairs by angle pos * base^(-2i/head_dim).

    Inputs are (..., len, head_dim).  The rotation is orthogonal, so norms
    are preserved per position, and q-k dot products depend only on the
    position difference.
    """
    if q.shape[-1] % 2 != 0:
        raise ValueError("head dimension must be even for rotary pairs")
    if base <= 0:
        raise ValueError("rotary base must be positive")
    length, hd = q.shape[-2], q.shape[-1]
    if positions is None:
        positions = np.arange(length, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape != (length,):
        raise ValueError("positions must be one value per sequence slot")

    inv_freq = base ** (-np.arange(0, hd, 2, dtype=np.float64) / hd)
    angles = positions[:, None] * inv_freq[None, :]  # (len, hd/2)
    cos, sin = np.cos(angles), np.sin(angles)

    def rotate(x: Tensor) -> Tensor:
        even, odd = x[..., 0::2], x[..., 1::2]
        r_even = even * cos - odd * sin
        r_odd = even * sin + odd * cos
        lead = x.shape[:-1]
        stacked = concat(
            [r_even.reshape(*lead, hd // 2, 1), r_odd.reshape(*lead, hd // 2, 1)], axis=-1
        )
        return stacked.reshape(*x.shape)

    return rotate(q), rotate(k)


def lora_linear(x: Tensor, w: Tensor, a: Tensor | None, b: Tensor | None, scale: float) -> Tensor:
    """x W^T plus the scaled low-rank correction x A^T B^T."""
    out = x @ w.transpose()
    if a is None:
        return out
    if a.shape[1] != w.shape[1] or b.shape[0] != w.shape[0] or a.shape[0] != b.shape[1]:
        raise ValueError("adapter factor shapes do not match the base matrix")
    return out + (x @ a.transpose()) @ b.transpose() * scale


class LoraAdapter:
    """Low-rank factors for the embedding matrix and each layer's attention linears.

    Keys are 'embedding/weight' and 'layer{i}/{wq,wk,wv,wo}'; each maps to
    an (A, B) pair with A of shape rank x d_in and B of shape d_out x rank.
    B starts at zero so a fresh adapter reproduces the base model exactly.
    """

    ATTN_MATS = ("wq", "wk", "wv", "wo")

    def __init__(self, tensors: dict[str, tuple[Tensor, Tensor]]):
        self.tensors = tensors

    @classmethod
    def create(cls, config: ModelConfig, rng: np.random.Generator) -> "LoraAdapter":
        r, d = config.lora_rank, config.d_model
        tensors = {}

        def pair(d_in: int, d_out: int) -> tuple[Tensor, Tensor]:
            a = Tensor(rng.normal(0.0, 0.02, (r, d_in)), grad_enabled=True)
            b = Tensor(np.zeros((d_out, r)), grad_enabled=True)
            return a, b

        tensors["embedding/weight"] = pair(config.vocab_size, d)
        for i in range(config.n_layers):
            for name in cls.ATTN_MATS:
                tensors[f"layer{i}/{name}"] = pair(d, d)
        return cls(tensors)

    def parameter_count(self) -> int:
        return sum(a.size + b.size for a, b in self.tensors.values())


@dataclass
class LayerWeights:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor


class EncoderModel:
    """Base transformer weights plus a named set of task adapters."""

    def __init__(self, config: ModelConfig, vocab: Vocab | None = None):
        self.config = config
        self.vocab = vocab
        self.adapters: dict[TaskKind, LoraAdapter] = {}
        self.stages_completed: set[int] = set()

        rng = np.random.default_rng(config.seed)
        d, ff = config.d_model, config.d_ff

        def w(shape) -> Tensor:
            return Tensor(rng.normal(0.0, 0.02, shape), grad_enabled=True)

        self.embedding = w((config.vocab_size, d))
        self.layers: list[LayerWeights] = []
        for _ in range(config.n_layers):
            self.layers.append(LayerWeights(
                wq=w((d, d)), wk=w((d, d)), wv=w((d, d)), wo=w((d, d)),
                ln1_gain=Tensor(np.ones(d), grad_enabled=True),
                ln1_bias=Tensor(np.zeros(d), grad_enabled=True),
                w1=w((ff, d)), b1=Tensor(np.zeros(ff), grad_enabled=True),
                w2=w((d, ff)), b2=Tensor(np.zeros(d), grad_enabled=True),
                ln2_gain=Tensor(np.ones(d), grad_enabled=True),
                ln2_bias=Tensor(np.zeros(d), grad_enabled=True),
            ))

    # -- parameter registry ---------------------------------------------

    def base_parameters(self) -> dict[str, Tensor]:
        params = {"base/embedding": self.embedding}
        for i, layer in enumerate(self.layers):
            prefix = f"base/layer{i}"
            params[f"{prefix}/wq"] = layer.wq
            params[f"{prefix}/wk"] = layer.wk
            params[f"{prefix}/wv"] = layer.wv
            params[f"{prefix}/wo"] = layer.wo
            params[f"{prefix}/ln1/gain"] = layer.ln1_gain
            params[f"{prefix}/ln1/bias"] = layer.ln1_bias
            params[f"{prefix}/ffn/w1"] = layer.w1
            params[f"{prefix}/ffn/b1"] = layer.b1
            params[f"{prefix}/ffn/w2"] = layer.w2
            params[f"{prefix}/ffn/b2"] = layer.b2
            params[f"{prefix}/ln2/gain"] = layer.ln2_gain
            params[f"{prefix}/ln2/bias"] = layer.ln2_bias
        return params

    def adapter_parameters(self, task: TaskKind) -> dict[str, Tensor]:
        adapter = self.adapters[task]
        params = {}
        for key, (a, b) in adapter.tensors.items():
            params[f"adapter/{task.value}/{key}/A"] = a
            params[f"adapter/{task.value}/{key}/B"] = b
        return params

    def named_parameters(self) -> dict[str, Tensor]:
        params = self.base_parameters()
        for task in sorted(self.adapters, key=lambda t: t.value):
            params.update(self.adapter_parameters(task))
        return params

    def base_weights_hash(self) -> str:
        digest = hashlib.sha256()
        for name, t in sorted(self.base_parameters().items()):
            digest.update(name.encode("utf-8"))
            digest.update(t.data.tobytes())
        return digest.hexdigest()

    def add_adapter(self, task: TaskKind) -> LoraAdapter:
        """Create (or return) the adapter for a task; init is seed-deterministic."""
        if task == TaskKind.NONE:
            raise ValueError("the base model has no adapter slot")
        if task not in self.adapters:
            idx = [t.value for t in ADAPTER_TASKS].index(task.value)
            rng = np.random.default_rng([self.config.seed, 1000 + idx])
            self.adapters[task] = LoraAdapter.create(self.config, rng)
        return self.adapters[task]

    # -- forward pass ----------------------------------------------------

    def _adapter_for(self, task: TaskKind) -> LoraAdapter | None:
        if task == TaskKind.NONE:
            return None
        if task not in self.adapters:
            raise ValueError(f"no adapter loaded for task {task.value!r}")
        return self.adapters[task]

    def forward(
        self,
        token_ids: np.ndarray,
        attn_mask: np.ndarray,
        task: TaskKind = TaskKind.NONE,
        rope_base: float | None = None,
    ) -> Tensor:
        """Hidden states (batch x len x d_model) with per-task adapter routing."""
        cfg = self.config
        ids = np.asarray(token_ids, dtype=np.int64)
        mask = np.asarray(attn_mask, dtype=np.float64)
        if ids.ndim != 2 or mask.shape != ids.shape:
            raise ValueError("token_ids and attn_mask must both be batch x len")
        if ids.shape[1] > cfg.max_seq_len:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds max_seq_len {cfg.max_seq_len}")
        if ids.size and ids.max() >= cfg.vocab_size:
            raise ValueError("token id out of vocabulary range")
        adapter = self._adapter_for(task)
        base = cfg.rope_base_train if rope_base is None else float(rope_base)
        bsz, length = ids.shape
        scale = cfg.lora_scale

        h = gather_rows(self.embedding, ids)
        if adapter is not None:
            a, b = adapter.tensors["embedding/weight"]
            h = h + gather_rows(a.transpose(), ids) @ b.transpose() * scale

        key_block = (mask == 0.0).reshape(bsz, 1, 1, length)
        hd = cfg.head_dim
        for i, layer in enumerate(self.layers):
            def adapted(name: str, x: Tensor, w: Tensor) -> Tensor:
                if adapter is None:
                    return lora_linear(x, w, None, None, scale)
                a, b = adapter.tensors[f"layer{i}/{name}"]
                return lora_linear(x, w, a, b, scale)

            x = layer_norm(h, layer.ln1_gain, layer.ln1_bias)
            q = adapted("wq", x, layer.wq).reshape(bsz, length, cfg.n_heads, hd).transpose(0, 2, 1, 3)
            k = adapted("wk", x, layer.wk).reshape(bsz, length, cfg.n_heads, hd).transpose(0, 2, 1, 3)
            v = adapted("wv", x, layer.wv).reshape(bsz, length, cfg.n_heads, hd).transpose(0, 2, 1, 3)
            q, k = apply_rope(q, k, base)
            scores = q @ k.transpose(0, 1, 3, 2) * (1.0 / np.sqrt(hd))
            scores = scores.masked_fill(key_block, -1e9)
            ctx = scores.softmax() @ v
            ctx = ctx.transpose(0, 2, 1, 3).reshape(bsz, length, cfg.d_model)
            h = h + adapted("wo", ctx, layer.wo)

            x = layer_norm(h, layer.ln2_gain, layer.ln2_bias)
            ff = (x @ layer.w1.transpose() + layer.b1).gelu() @ layer.w2.transpose() + layer.b2
            h = h + ff
        return h

    def mlm_logits(self, states: Tensor) -> Tensor:
        """Vocabulary logits tied to the base embedding matrix."""
        return states @ self.embedding.transpose()

    # -- pooling and embedding --------------------------------------------

    def encode_tokens(
        self,
        token_ids: np.ndarray,
        attn_mask: np.ndarray,
        task: TaskKind = TaskKind.NONE,
        rope_base: float | None = None,
    ) -> Tensor:
        """Mean-pooled (batch x d_model) sentence vectors, not yet normalized."""
        states = self.forward(token_ids, attn_mask, task=task, rope_base=rope_base)
        return mean_pool(states, attn_mask)

    def embed(
        self,
        texts: Sequence[str],
        task: TaskKind = TaskKind.NONE,
        target_dim: int | None = None,
        rope_base: float | None = None,
        instructions: bool = False,
        max_len: int | None = None,
        batch_size: int = 64,
    ) -> np.ndarray:
        """Unit-norm embeddings truncated to ``target_dim`` (inference path).

        Uses the inference rotary base unless overridden.  With
        ``instructions`` set, retrieval tasks get their role prefix before
        tokenization.
        """
        cfg = self.config
        if self.vocab is None:
            raise RuntimeError("model has no vocabulary attached")
        target_dim = cfg.d_model if target_dim is None else int(target_dim)
        if target_dim not in cfg.mrl_dims:
            raise ValueError(f"target_dim {target_dim} not in mrl_dims {cfg.mrl_dims}")
        base = cfg.rope_base_infer if rope_base is None else float(rope_base)
        prefix = INSTRUCTION_PREFIXES.get(task, "") if instructions else ""
        limit = cfg.max_seq_len if max_len is None else min(int(max_len), cfg.max_seq_len)

        rows = []
        with no_grad():
            for start in range(0, len(texts), batch_size):
                chunk = texts[start:start + batch_size]
                ids, mask = pad_token_batch(
                    [self.vocab.tokenize(prefix + t) for t in chunk], limit, self.vocab.pad_id
                )
                pooled = self.encode_tokens(ids, mask, task=task, rope_base=base)
                trunc = pooled[:, :target_dim].l2_normalize()
                rows.append(trunc.data)
        return np.concatenate(rows, axis=0) if rows else np.zeros((0, target_dim))


def mean_pool(states: Tensor, attn_mask: np.ndarray) -> Tensor:
    """Average the unmasked token vectors of each row."""
    mask = np.asarray(attn_mask, dtype=np.float64)
    counts = mask.sum(axis=1)
    if np.any(counts == 0.0):
        raise ValueError("mean_pool saw a fully masked row")
    weighted = states * mask[:, :, None]
    return weighted.sum(axis=1) / Tensor(counts[:, None])


def pad_token_batch(
    sequences: Sequence[Sequence[int]], max_len: int, pad_id: int
) -> tuple[np.ndarray, np.ndarray]:
    """Truncate to ``max_len``, right-pad, and build the attention mask."""
    clipped = [list(s[:max_len]) for s in sequences]
    if any(len(s) == 0 for s in clipped):
        raise ValueError("cannot batch an empty token sequence")
    width = max(len(s) for s in clipped)
    ids = np.full((len(clipped), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(clipped), width), dtype=np.float64)
    for r, seq in enumerate(clipped):
        ids[r, :len(seq)] = seq
        mask[r, :len(seq)] = 1.0
    return ids, mask


def count_parameters(model: EncoderModel) -> tuple[int, dict[str, int]]:
    """Exact base parameter count and per-task adapter counts."""
    base = sum(t.size for t in model.base_parameters().values())
    adapters = {task.value: adapter.parameter_count()
                for task, adapter in sorted(model.adapters.items(), key=lambda kv: kv[0].value)}
    return base, adapters


def closed_form_param_counts(config: ModelConfig) -> tuple[int, int]:
    """(base, per-adapter) counts from the architecture formulas (no allocation)."""
    d, ff, v = config.d_model, config.d_ff, config.vocab_size
    per_layer = 4 * d * d + (ff * d + ff) + (d * ff + d) + 4 * d
    base = v * d + config.n_layers * per_layer
    r = config.lora_rank
    per_adapter = r * (v + d) + config.n_layers * 4 * r * (d + d)
    return base, per_adapter


def adapter_share(config: ModelConfig, n_adapters: int = len(ADAPTER_TASKS)) -> float:
    """Adapter parameters as a fraction of the base parameter count."""
    base, per_adapter = closed_form_param_counts(config)
    return n_adapters * per_adapter / base
