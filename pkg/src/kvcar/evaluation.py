"""Perplexity over held-out windows, via the parallel forward or the cached decode path."""

from __future__ import annotations

import math

import numpy as np

from . import corpus as C
from . import tensor as T
from .model import TransformerModel


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _nll(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    lp = _log_softmax(logits.astype(np.float64))
    return -np.take_along_axis(lp, targets[..., None], axis=-1)[..., 0]


def perplexity(
    model: TransformerModel,
    tokens,
    seq_len: int,
    codecs=None,
    plan=None,
    cached: bool = True,
    max_windows: int | None = None,
    memoize_decoded: bool = False,
) -> float:
    """exp(mean next-token CE) over non-overlapping windows of ``tokens``.

    With ``cached`` each window is fed as a one-token prefill followed by
    single-token decode steps, so every codec and alias is exercised.
    """
    win = C.windows(tokens, seq_len)
    if max_windows is not None:
        win = win[:max_windows]
    nll = []
    for w in win:
        x, y = w[:-1], w[1:]
        if cached:
            cache = model.new_cache(codecs, plan, memoize_decoded)
            rows = [model.prefill(x[:1], cache).data]
            rows += [model.decode_step(int(t), cache).data for t in x[1:]]
            logits = np.concatenate(rows, axis=0)
        else:
            with T.no_grad():
                logits = model.forward(x[None], codecs=codecs, plan=plan).data[0]
        nll.append(_nll(logits, y))
    return math.exp(float(np.concatenate(nll).mean()))
