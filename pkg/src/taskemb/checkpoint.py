"""Binary weight container and model round-tripping.

File layout: 4-byte magic ``TEMB``, one version byte, a uint32
little-endian length prefix, a UTF-8 JSON header mapping tensor name to
{shape, offset}, then the raw little-endian float64 payloads.  A JSON
sidecar (``<path>.meta.json``) carries the config, seed, completed stages,
step counter, and the vocabulary.  Adapter tensors are namespaced
``adapter/<task>/<layer>/<matrix>/{A,B}``.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .data import DataError, atomic_write_bytes, atomic_write_text
from .encoder import EncoderModel, LoraAdapter, ModelConfig, TaskKind
from .tensor import Tensor
from .tokenizer import Vocab

MAGIC = b"TEMB"
VERSION = 1


class CheckpointError(DataError):
    """Unreadable, truncated, or version-incompatible checkpoint files."""


def meta_path(path: str) -> str:
    return path + ".meta.json"


def save_tensors(path: str, tensors: dict[str, np.ndarray]) -> None:
    header: dict[str, dict] = {}
    chunks: list[bytes] = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        header[name] = {"shape": list(arr.shape), "offset": offset}
        blob = arr.tobytes()
        chunks.append(blob)
        offset += len(blob)
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    out = MAGIC + bytes([VERSION]) + struct.pack("<I", len(header_bytes)) + header_bytes + b"".join(chunks)
    atomic_write_bytes(path, out)


def load_tensors(path: str) -> dict[str, np.ndarray]:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < 9 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a weight container (bad magic)")
    version = blob[4]
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported container version {version}")
    (header_len,) = struct.unpack("<I", blob[5:9])
    if len(blob) < 9 + header_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[9:9 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    payload = blob[9 + header_len:]

    tensors: dict[str, np.ndarray] = {}
    for name, spec in header.items():
        shape = tuple(int(s) for s in spec["shape"])
        offset = int(spec["offset"])
        nbytes = int(np.prod(shape)) * 8 if shape else 8
        if offset + nbytes > len(payload):
            raise CheckpointError(f"{path}: truncated payload for tensor {name!r}")
        arr = np.frombuffer(payload, dtype="<f8", count=nbytes // 8, offset=offset)
        tensors[name] = arr.reshape(shape).astype(np.float64)
    return tensors


def save_checkpoint(model: EncoderModel, path: str, optimizer=None) -> None:
    """Write weights (and optional optimizer moments) plus the metadata sidecar."""
    tensors = {name: t.data for name, t in model.named_parameters().items()}
    step = 0
    if optimizer is not None:
        step = optimizer.step_count
        for name, arr in optimizer.state_arrays().items():
            tensors[name] = arr
    save_tensors(path, tensors)

    meta = {
        "format_version": VERSION,
        "config": model.config.to_json(),
        "seed": model.config.seed,
        "stages_completed": sorted(model.stages_completed),
        "step": step,
        "vocab": model.vocab.to_json() if model.vocab is not None else None,
    }
    atomic_write_text(meta_path(path), json.dumps(meta, sort_keys=True, indent=1) + "\n")


def load_checkpoint(path: str, with_optimizer: bool = False):
    """Rebuild the model (and optionally raw optimizer moments) from disk.

    A checkpoint without adapter tensors loads into a model with an empty
    adapter map.  Returns the model, or (model, opt_state) when
    ``with_optimizer`` is set; opt_state maps 'opt/...' names to arrays.
    """
    try:
        with open(meta_path(path), "r", encoding="utf-8") as fh:
            meta = json.load(fh)
    except OSError as exc:
        raise CheckpointError(f"missing metadata sidecar for {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt metadata sidecar for {path}") from exc
    if meta.get("format_version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")

    config = ModelConfig.from_json(meta["config"])
    vocab = Vocab.from_json(meta["vocab"]) if meta.get("vocab") else None
    model = EncoderModel(config, vocab=vocab)
    model.stages_completed = set(int(s) for s in meta.get("stages_completed", []))

    tensors = load_tensors(path)
    for name, tensor in model.base_parameters().items():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing base tensor {name!r}")
        if tensors[name].shape != tensor.shape:
            raise CheckpointError(f"{path}: shape mismatch for {name!r}")
        tensor.data[...] = tensors[name]

    adapters: dict[TaskKind, dict[str, dict[str, np.ndarray]]] = {}
    opt_state: dict[str, np.ndarray] = {}
    for name, arr in tensors.items():
        if name.startswith("opt/"):
            opt_state[name] = arr
            continue
        if not name.startswith("adapter/"):
            continue
        parts = name.split("/")
        task = TaskKind.parse(parts[1])
        key = "/".join(parts[2:-1])
        adapters.setdefault(task, {}).setdefault(key, {})[parts[-1]] = arr

    for task, slots in adapters.items():
        fresh = LoraAdapter.create(model.config, np.random.default_rng(0))
        if sorted(slots) != sorted(fresh.tensors):
            raise CheckpointError(f"{path}: incomplete adapter tensors for {task.value!r}")
        built = {}
        for key, ab in slots.items():
            if "A" not in ab or "B" not in ab:
                raise CheckpointError(f"{path}: adapter slot {key!r} is missing A or B")
            expect_a, expect_b = fresh.tensors[key]
            if ab["A"].shape != expect_a.shape or ab["B"].shape != expect_b.shape:
                raise CheckpointError(f"{path}: adapter shape mismatch at {key!r}")
            built[key] = (Tensor(ab["A"], grad_enabled=True), Tensor(ab["B"], grad_enabled=True))
        model.adapters[task] = LoraAdapter(built)

    if with_optimizer:
        return model, opt_state
    return model
