"""Shared rigs and oracles for the test suite."""

from __future__ import annotations

import functools

import numpy as np

from kvcar import corpus as C
from kvcar import tensor as T
from kvcar.model import ModelConfig, TransformerModel
from kvcar.training import TrainConfig, pretrain


def fd_check(fn, arrays, eps=1e-6):
    """Max relative error between autodiff and central differences, per input.

    ``fn`` maps float64 Tensors to a scalar Tensor. Returns a list of
    ``||analytic - numeric|| / max(||analytic||, ||numeric||)``.
    """
    errs = []
    with T.default_dtype(np.float64):
        ts = [T.Tensor(np.array(a, dtype=np.float64), True) for a in arrays]
        T.backward(fn(*ts))
        for t in ts:
            analytic = t.grad
            numeric = np.zeros_like(t.data)
            it = np.nditer(t.data, flags=["multi_index"])
            for _ in it:
                i = it.multi_index
                old = t.data[i]
                t.data[i] = old + eps
                hi = fn(*ts).item()
                t.data[i] = old - eps
                lo = fn(*ts).item()
                t.data[i] = old
                numeric[i] = (hi - lo) / (2 * eps)
            scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
            errs.append(float(np.linalg.norm(analytic - numeric) / scale))
    return errs


def weighted(out, seed=0):
    """Reduce a tensor to a scalar with fixed random weights (a generic loss)."""
    w = np.random.default_rng(seed).normal(size=out.shape)
    return T.tsum(out * w)


# one case per differentiable primitive: fn(*tensors) -> scalar, input arrays
rng = np.random.default_rng(7)


def away_from_zero(shape, margin=0.2):
    x = rng.normal(size=shape)
    return np.sign(x) * (margin + np.abs(x))


bn_state = T.BatchNormState(4)
causal = np.tril(np.ones((4, 4), dtype=bool))

GRAD_CASES = {
    "add_broadcast": (lambda a, b: weighted(a + b), [rng.normal(size=(3, 4)), rng.normal(size=(4,))]),
    "sub": (lambda a, b: weighted(a - b), [rng.normal(size=(3, 4)), rng.normal(size=(3, 1))]),
    "mul": (lambda a, b: weighted(a * b), [rng.normal(size=(2, 3)), rng.normal(size=(2, 3))]),
    "div": (lambda a, b: weighted(a / b), [rng.normal(size=(2, 3)), 1.0 + rng.random((2, 3))]),
    "exp": (lambda a: weighted(T.exp(a)), [rng.normal(size=(5,))]),
    "log": (lambda a: weighted(T.log(a)), [0.5 + rng.random((5,))]),
    "abs": (lambda a: weighted(T.tabs(a)), [away_from_zero((6,))]),
    "leaky_relu": (lambda a: weighted(T.leaky_relu(a, 0.01)), [away_from_zero((6,))]),
    "gelu": (lambda a: weighted(T.gelu(a)), [rng.normal(size=(3, 4))]),
    "sum_axis": (lambda a: weighted(T.tsum(a, axis=1)), [rng.normal(size=(3, 4))]),
    "mean_keepdims": (lambda a: weighted(T.mean(a, axis=0, keepdims=True)), [rng.normal(size=(3, 4))]),
    "reshape": (lambda a: weighted(T.reshape(a, (4, 3))), [rng.normal(size=(3, 4))]),
    "transpose": (lambda a: weighted(T.transpose(a, (1, 2, 0))), [rng.normal(size=(2, 3, 4))]),
    "swapaxes": (lambda a: weighted(T.swapaxes(a, 0, 2)), [rng.normal(size=(2, 3, 4))]),
    "index_repeat": (lambda a: weighted(a[[0, 0, 2]]), [rng.normal(size=(3, 2))]),
    "index_slice": (lambda a: weighted(a[..., 1:3]), [rng.normal(size=(2, 4))]),
    "take_rows": (lambda a: weighted(T.take_rows(a, np.array([[1, 1], [0, 3]]))), [rng.normal(size=(4, 3))]),
    "concat": (lambda a, b: weighted(T.concat([a, b, a], axis=-1)), [rng.normal(size=(2, 2)), rng.normal(size=(2, 3))]),
    "matmul": (lambda a, b: weighted(a @ b), [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]),
    "matmul_batched": (lambda a, b: weighted(a @ b), [rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))]),
    "softmax_masked": (lambda a: weighted(T.softmax_rows(a, causal)), [rng.normal(size=(2, 4, 4))]),
    "layernorm": (lambda x, g, b: weighted(T.layernorm(x, g, b)),
                  [rng.normal(size=(3, 5)), 1 + 0.1 * rng.normal(size=5), rng.normal(size=5)]),
    "batchnorm_train": (lambda x, g, b: weighted(T.batchnorm(x, g, b, bn_state, True)),
                        [rng.normal(size=(6, 4)), 1 + 0.1 * rng.normal(size=4), rng.normal(size=4)]),
    "batchnorm_eval": (lambda x, g, b: weighted(T.batchnorm(x, g, b, bn_state, False)),
                       [rng.normal(size=(6, 4)), 1 + 0.1 * rng.normal(size=4), rng.normal(size=4)]),
    "cross_entropy": (lambda a: T.cross_entropy(a, np.array([[0, 3], [2, 2]])), [rng.normal(size=(2, 2, 5))]),
    "l1_loss": (lambda a, b: T.l1_loss(a, b), [rng.normal(size=(4, 3)), rng.normal(size=(4, 3)) + 3.0]),
}


def model_gradient_error(n_per_param: int = 4) -> float:
    """Relative error of autodiff vs central differences on a 2-layer model's CE,
    sampled over a few entries of every parameter."""
    cfg = ModelConfig(n_layers=2, n_heads=2, d_model=8, d_ff=12, vocab_size=11, max_seq=8)
    tokens = np.random.default_rng(1).integers(0, 11, size=(2, 6))
    x, y = tokens[:, :-1], tokens[:, 1:]
    with T.default_dtype(np.float64):
        m = TransformerModel(cfg, seed=3)

        def loss():
            return T.cross_entropy(m.forward(x), y)

        T.backward(loss())
        sample = np.random.default_rng(2)
        analytic, numeric = [], []
        for p in m.parameters():
            flat = p.data.reshape(-1)
            for j in sample.choice(flat.size, size=min(n_per_param, flat.size), replace=False):
                old = flat[j]
                flat[j] = old + 1e-6
                hi = loss().item()
                flat[j] = old - 1e-6
                lo = loss().item()
                flat[j] = old
                numeric.append((hi - lo) / 2e-6)
                analytic.append(p.grad.reshape(-1)[j])
    a, n = np.array(analytic), np.array(numeric)
    return float(np.linalg.norm(a - n) / np.linalg.norm(n))


def clamped_mask(x):
    """Elements whose unclamped code falls outside [-128, 127] (independent recomputation)."""
    lo, hi = x.min(), x.max()
    s = 255.0 / (hi - lo)
    raw = s * x + (-np.sign(s * lo) * np.floor(abs(s * lo) + 0.5) - 128)
    r = np.sign(raw) * np.floor(np.abs(raw) + 0.5)
    return (r > 127) | (r < -128)


def duplicated_layer_model(cfg: ModelConfig, seed: int = 0) -> TransformerModel:
    """Every layer carries layer 0's attention projections and only the last
    layer writes to the residual stream, so all layers see identical K and V."""
    m = TransformerModel(cfg, seed)
    shared = ("ln1.gamma", "ln1.beta", "attn.w_q", "attn.w_k", "attn.w_v")
    for i in range(1, cfg.n_layers):
        for name in shared:
            m.layer(i, name).data = m.layer(0, name).data.copy()
    for i in range(cfg.n_layers - 1):
        for name in ("attn.w_o", "ffn.w2", "ffn.b2"):
            m.layer(i, name).data = np.zeros_like(m.layer(i, name).data)
    return m


TOY_CFG = ModelConfig(n_layers=2, n_heads=4, d_model=32, d_ff=64, max_seq=64)


@functools.lru_cache(maxsize=None)
def toy_corpus(n_bytes: int = 64 * 1024, seed: int = 0) -> C.Corpus:
    return C.from_bytes(C.word_text(n_bytes, seed=seed), seed=seed)


@functools.lru_cache(maxsize=None)
def _pretrained_state(seed: int, epochs: int):
    m = TransformerModel(TOY_CFG, seed)
    pretrain(m, toy_corpus().train, TrainConfig(lr=0.5, epochs=epochs, seed=seed))
    return m.state_dict()


def pretrained_toy(seed: int = 0, epochs: int = 3) -> TransformerModel:
    """A fresh copy of the seeded toy model pretrained on the word corpus."""
    m = TransformerModel(TOY_CFG, seed)
    m.load_state_dict(_pretrained_state(seed, epochs))
    return m
