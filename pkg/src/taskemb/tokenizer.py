"""Word-level toy tokenizer.

Lowercase, Unicode-whitespace split, one id per word, so whole-word masking
coincides with token masking.  The vocabulary is built by frequency with
three reserved specials (pad, unk, mask) and optional caller-reserved
tokens (instruction prefixes, tuple-id markers).
"""

from __future__ import annotations

from collections import Counter
from typing import Iterable, Sequence

import numpy as np

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
MASK_TOKEN = "<mask>"
SPECIALS = (PAD_TOKEN, UNK_TOKEN, MASK_TOKEN)


def words_of(text: str) -> list[str]:
    return text.lower().split()


class Vocab:
    """Immutable word-to-id table; ids 0..2 are pad/unk/mask."""

    def __init__(self, words: Sequence[str]):
        words = list(words)
        if tuple(words[:3]) != SPECIALS:
            raise ValueError("vocabulary must start with the pad/unk/mask specials")
        if len(set(words)) != len(words):
            raise ValueError("vocabulary contains duplicate words")
        self.words = words
        self.index = {w: i for i, w in enumerate(words)}

    def __len__(self) -> int:
        return len(self.words)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    @property
    def mask_id(self) -> int:
        return 2

    @property
    def n_specials(self) -> int:
        return 3

    def tokenize(self, text: str) -> list[int]:
        unk = self.unk_id
        return [self.index.get(w, unk) for w in words_of(text)]

    def detokenize(self, ids: Iterable[int]) -> str:
        return " ".join(self.words[int(i)] for i in ids)

    def to_json(self) -> dict:
        return {"words": list(self.words)}

    @classmethod
    def from_json(cls, payload: dict) -> "Vocab":
        return cls(payload["words"])


def build_vocab(texts: Iterable[str], max_size: int = 4096, extra: Sequence[str] = ()) -> Vocab:
    """Top-``max_size`` vocabulary by frequency (ties broken alphabetically).

    ``extra`` tokens are reserved right after the specials regardless of
    corpus frequency.
    """
    if max_size < 3:
        raise ValueError("max_size must leave room for the specials")
    reserved = list(SPECIALS)
    for tok in extra:
        low = tok.lower()
        if low not in reserved:
            reserved.append(low)
    if len(reserved) > max_size:
        raise ValueError("extra tokens exceed max_size")

    counts: Counter[str] = Counter()
    for text in texts:
        counts.update(words_of(text))
    for tok in reserved:
        counts.pop(tok, None)

    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    room = max_size - len(reserved)
    return Vocab(reserved + [w for w, _ in ranked[:room]])


def whole_word_mask(
    token_ids: Sequence[int], ratio: float, rng: np.random.Generator, vocab: Vocab
) -> tuple[list[int], list[int], list[bool]]:
    """BERT-style corruption of a token sequence.

    Each word is selected independently with probability ``ratio``; selected
    words become the mask token 80% of the time, a random regular id 10%,
    and stay unchanged 10%.  Returns (corrupted ids, original ids, selected
    flags); targets are read at the selected positions.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("mask ratio must lie in [0, 1]")
    ids = [int(t) for t in token_ids]
    corrupted = list(ids)
    selected = [False] * len(ids)
    low, high = vocab.n_specials, len(vocab)
    for i in range(len(ids)):
        if rng.random() >= ratio:
            continue
        selected[i] = True
        roll = rng.random()
        if roll < 0.8:
            corrupted[i] = vocab.mask_id
        elif roll < 0.9 and high > low:
            corrupted[i] = int(rng.integers(low, high))
        # else: keep the original token
    return corrupted, ids, selected
