"""Byte-level corpora, deterministic splits and window batching."""

from __future__ import annotations

import os
import string
from dataclasses import dataclass

import numpy as np

MIN_CORPUS_BYTES = 10 * 1024


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Corpus:
    raw: bytes
    tokens: np.ndarray  # int64 byte ids
    train_idx: np.ndarray  # token positions in the training slice
    heldout_idx: np.ndarray

    @property
    def train(self) -> np.ndarray:
        return self.tokens[self.train_idx]

    @property
    def heldout(self) -> np.ndarray:
        return self.tokens[self.heldout_idx]


def from_bytes(raw: bytes, seed: int = 0, heldout_frac: float = 0.1, block: int = 1024,
               min_bytes: int = MIN_CORPUS_BYTES) -> Corpus:
    """Split ``raw`` into contiguous blocks and hold out a seeded random subset of them."""
    if len(raw) == 0:
        raise CorpusError("corpus is empty")
    if len(raw) < min_bytes:
        raise CorpusError(f"corpus has {len(raw)} bytes; at least {min_bytes} are required")
    if not 0 < heldout_frac < 1:
        raise CorpusError("heldout_frac must be in (0, 1)")
    tokens = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    n_blocks = max(2, -(-len(tokens) // block))
    edges = np.linspace(0, len(tokens), n_blocks + 1).astype(int)
    rng = np.random.default_rng(seed)
    n_held = max(1, int(round(heldout_frac * n_blocks)))
    held = np.zeros(n_blocks, dtype=bool)
    held[rng.choice(n_blocks, n_held, replace=False)] = True
    train_idx = np.concatenate([np.arange(edges[b], edges[b + 1]) for b in range(n_blocks) if not held[b]])
    held_idx = np.concatenate([np.arange(edges[b], edges[b + 1]) for b in range(n_blocks) if held[b]])
    return Corpus(raw, tokens, train_idx, held_idx)


def load(path, seed: int = 0, heldout_frac: float = 0.1, min_bytes: int = MIN_CORPUS_BYTES) -> Corpus:
    path = os.fspath(path)
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as exc:
        raise CorpusError(f"cannot read corpus {path!r}: {exc.strerror}") from exc
    return from_bytes(raw, seed, heldout_frac, min_bytes=min_bytes)


def cyclic_text(n_bytes: int) -> bytes:
    """The lowercase alphabet repeated to ``n_bytes``."""
    abc = string.ascii_lowercase.encode()
    return (abc * (n_bytes // 26 + 1))[:n_bytes]


def word_text(n_bytes: int, seed: int = 0, n_words: int = 40) -> bytes:
    """Seeded pseudo-sentences over a small fixed vocabulary of made-up words."""
    rng = np.random.default_rng(seed)
    letters = np.array(list(string.ascii_lowercase))
    words = ["".join(rng.choice(letters, rng.integers(2, 7))) for _ in range(n_words)]
    # a sparse first-order transition table keeps the text predictable
    nxt = rng.integers(0, n_words, (n_words, 3))
    out, w = [], 0
    size = 0
    while size < n_bytes:
        word = words[w]
        out.append(word)
        size += len(word) + 1
        w = int(nxt[w, rng.integers(0, 3)])
        if rng.random() < 0.1:
            out[-1] += "."
            size += 1
    return " ".join(out).encode()[:n_bytes]


def windows(tokens: np.ndarray, seq_len: int) -> np.ndarray:
    """Non-overlapping windows of ``seq_len + 1`` tokens, shape [N, seq_len + 1]."""
    n = (len(tokens) - 1) // seq_len
    if n < 1:
        raise CorpusError(f"need more than {seq_len} tokens to form one window")
    idx = np.arange(n)[:, None] * seq_len + np.arange(seq_len + 1)[None, :]
    return np.asarray(tokens)[idx]


def batches(tokens: np.ndarray, seq_len: int, batch_size: int, rng: np.random.Generator | None = None):
    """Yield ``(inputs[B, T], targets[B, T])`` covering every window once; shuffled when ``rng`` is given."""
    win = windows(tokens, seq_len)
    order = rng.permutation(len(win)) if rng is not None else np.arange(len(win))
    for s in range(0, len(win), batch_size):
        w = win[order[s : s + batch_size]]
        yield w[:, :-1], w[:, 1:]
