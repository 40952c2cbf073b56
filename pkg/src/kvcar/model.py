"""Toy decoder-only transformer with codec- and reuse-aware attention.

Two forward routes share the same attention arithmetic:

* ``forward`` processes ``[B, T]`` token windows at once (training, stats
  collection, cacheless evaluation). Codecs are applied as store-then-load
  round trips on the keys/values that *later* positions see.
* ``prefill`` / ``decode_step`` go through a :class:`~kvcar.kvcache.KVCache`.

In both, a query attends to the decoded (cached) keys/values of earlier
positions plus its own raw full-width key/value. Aliased head slots take the
previous layer's effective keys/values for that head.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .kvcache import CodecSpec, KVCache, ReusePlan
from .tensor import Tensor

BYTE_VOCAB = 256
BOS = 256


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 32
    d_ff: int = 64
    vocab_size: int = BYTE_VOCAB + 1
    max_seq: int = 64

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "d_ff", "vocab_size", "max_seq"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def n_params(self) -> int:
        D, F, V = self.d_model, self.d_ff, self.vocab_size
        per_layer = 4 * D * D + 4 * D + D * F + F + F * D + D
        return V * D + self.max_seq * D + self.n_layers * per_layer + 2 * D + D * V

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LayerKV:
    """Keys/values one layer attended with, kept for the next layer's aliased heads."""

    k_mem: Tensor  # what later positions read (decoded)
    v_mem: Tensor
    k_cur: Tensor  # what each position uses for itself (raw)
    v_cur: Tensor


@dataclass
class ForwardAux:
    """Per-layer tensors needed by the compression and reuse losses."""

    k: list = field(default_factory=list)  # raw projections, [B, T, D]
    v: list = field(default_factory=list)
    recon: list = field(default_factory=list)  # (layer, kind, raw live slice, reconstruction)
    reuse: list = field(default_factory=list)  # (layer, head, kind, own slice, reused slice)


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """[..., T, D] -> [..., h, T, D/h]."""
    *lead, t, d = x.shape
    y = T.reshape(x, (*lead, t, n_heads, d // n_heads))
    return T.swapaxes(y, -2, -3)


def merge_heads(x: Tensor) -> Tensor:
    """[..., h, T, dk] -> [..., T, h*dk]."""
    y = T.swapaxes(x, -2, -3)
    *lead, t, h, dk = y.shape
    return T.reshape(y, (*lead, t, h * dk))


def attention_head(Q, K, V, causal: bool = False) -> Tensor:
    """softmax(Q K^T / sqrt(dk)) V for one head; causal aligns query rows to the key suffix."""
    Q, K, V = T.as_tensor(Q), T.as_tensor(K), T.as_tensor(V)
    if Q.shape[-1] != K.shape[-1] or K.shape[:-1] != V.shape[:-1]:
        raise T.ShapeError(f"attention_head: Q {Q.shape}, K {K.shape}, V {V.shape}")
    t, s = Q.shape[-2], K.shape[-2]
    scores = (Q @ T.swapaxes(K, -1, -2)) * (1.0 / math.sqrt(Q.shape[-1]))
    mask = None
    if causal:
        if s < t:
            raise ValueError("causal attention needs at least as many keys as queries")
        mask = np.arange(s)[None, :] <= (np.arange(t)[:, None] + s - t)
    return T.softmax_rows(scores, mask) @ V


def mixed_attention(q, k_mem, v_mem, k_cur, v_cur, offset: int) -> Tensor:
    """Causal attention where each query sees cached rows before it plus its own raw row.

    ``q``, ``k_cur``, ``v_cur``: [..., t, dk]; ``k_mem``, ``v_mem``: [..., S, dk].
    Query ``i`` sits at absolute position ``offset + i`` and may read memory
    rows ``j < offset + i``.
    """
    t, S, dk = q.shape[-2], k_mem.shape[-2], q.shape[-1]
    scale = 1.0 / math.sqrt(dk)
    s_mem = (q @ T.swapaxes(k_mem, -1, -2)) * scale
    s_self = T.tsum(q * k_cur, axis=-1, keepdims=True) * scale
    scores = T.concat([s_mem, s_self], axis=-1)
    mask = np.ones((t, S + 1), dtype=bool)
    mask[:, :S] = np.arange(S)[None, :] < (offset + np.arange(t))[:, None]
    p = T.softmax_rows(scores, mask)
    return p[..., :S] @ v_mem + p[..., S:] * v_cur


class TransformerModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        D, F, V = cfg.d_model, cfg.d_ff, cfg.vocab_size

        def w(shape, fan_in):
            return Tensor(rng.normal(0.0, 1.0 / math.sqrt(fan_in), shape), True)

        p: dict[str, Tensor] = {}
        p["tok_emb"] = Tensor(rng.normal(0.0, 1.0, (V, D)), True)
        p["pos_emb"] = Tensor(rng.normal(0.0, 0.1, (cfg.max_seq, D)), True)
        for i in range(cfg.n_layers):
            pre = f"layers.{i}."
            for ln in ("ln1", "ln2"):
                p[pre + ln + ".gamma"] = Tensor(np.ones(D), True)
                p[pre + ln + ".beta"] = Tensor(np.zeros(D), True)
            for name in ("w_q", "w_k", "w_v"):
                p[pre + "attn." + name] = w((D, D), D)
            p[pre + "attn.w_o"] = w((D, D), D * 2 * cfg.n_layers)
            p[pre + "ffn.w1"] = w((D, F), D)
            p[pre + "ffn.b1"] = Tensor(np.zeros(F), True)
            p[pre + "ffn.w2"] = w((F, D), F * 2 * cfg.n_layers)
            p[pre + "ffn.b2"] = Tensor(np.zeros(D), True)
        p["ln_f.gamma"] = Tensor(np.ones(D), True)
        p["ln_f.beta"] = Tensor(np.zeros(D), True)
        p["head.w"] = w((D, V), D)
        self.params = p

    # ------------------------------------------------------------ parameters

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_params(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            if state[k].shape != t.shape:
                raise ValueError(f"{k}: stored shape {state[k].shape} != expected {t.shape}")
            t.data = np.array(state[k], dtype=t.data.dtype)

    def copy(self) -> "TransformerModel":
        other = TransformerModel.__new__(TransformerModel)
        other.cfg = self.cfg
        other.params = {k: Tensor(v.data, True) for k, v in self.params.items()}
        return other

    def set_trainable(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = flag

    def layer(self, i: int, name: str) -> Tensor:
        return self.params[f"layers.{i}.{name}"]

    # ------------------------------------------------------------ building blocks

    def _embed(self, tokens: np.ndarray, start: int) -> Tensor:
        tokens = np.asarray(tokens)
        t = tokens.shape[-1]
        if start + t > self.cfg.max_seq:
            raise ValueError(f"sequence of {start + t} tokens exceeds max_seq {self.cfg.max_seq}")
        pos = self.params["pos_emb"][start : start + t]
        return T.take_rows(self.params["tok_emb"], tokens) + pos

    def _ffn(self, i: int, x: Tensor) -> Tensor:
        h = T.layernorm(x, self.layer(i, "ln2.gamma"), self.layer(i, "ln2.beta"))
        h = T.gelu(h @ self.layer(i, "ffn.w1") + self.layer(i, "ffn.b1"))
        return h @ self.layer(i, "ffn.w2") + self.layer(i, "ffn.b2")

    def _project(self, i: int, x: Tensor):
        a = T.layernorm(x, self.layer(i, "ln1.gamma"), self.layer(i, "ln1.beta"))
        return a @ self.layer(i, "attn.w_q"), a @ self.layer(i, "attn.w_k"), a @ self.layer(i, "attn.w_v")

    def _head_cols(self, h: int) -> slice:
        dk = self.cfg.head_dim
        return slice(h * dk, (h + 1) * dk)

    def _substitute(self, own: Tensor, prev: Tensor | None, aliased: list[int]) -> Tensor:
        """Replace aliased head columns of ``own`` with those of ``prev``."""
        if not aliased:
            return own
        parts = [
            prev[..., self._head_cols(h)] if h in aliased else own[..., self._head_cols(h)]
            for h in range(self.cfg.n_heads)
        ]
        return T.concat(parts, axis=-1)

    def _attend(self, i: int, q: Tensor, kv: LayerKV, offset: int) -> Tensor:
        h = self.cfg.n_heads
        out = mixed_attention(
            split_heads(q, h),
            split_heads(kv.k_mem, h),
            split_heads(kv.v_mem, h),
            split_heads(kv.k_cur, h),
            split_heads(kv.v_cur, h),
            offset,
        )
        return merge_heads(out) @ self.layer(i, "attn.w_o")

    def _logits(self, x: Tensor) -> Tensor:
        x = T.layernorm(x, self.params["ln_f.gamma"], self.params["ln_f.beta"])
        return x @ self.params["head.w"]

    # ------------------------------------------------------------ parallel route

    def forward(
        self,
        tokens,
        codecs: dict[int, CodecSpec] | None = None,
        plan: ReusePlan | None = None,
        ae_training: bool = False,
        aux: ForwardAux | None = None,
    ) -> Tensor:
        """Logits ``[B, T, V]`` for token windows ``[B, T]`` (a 1-D input is treated as B=1)."""
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        codecs = codecs or {}
        cfg = self.cfg
        x = self._embed(tokens, 0)
        prev: LayerKV | None = None
        for i in range(cfg.n_layers):
            q, k, v = self._project(i, x)
            if aux is not None:
                aux.k.append(k)
                aux.v.append(v)
            eff = {}
            for kind, raw in (("k", k), ("v", v)):
                aliased = [] if plan is None else [h for h in range(cfg.n_heads) if plan.is_aliased(i, h, kind)]
                prev_cur = getattr(prev, f"{kind}_cur") if prev is not None else None
                prev_mem = getattr(prev, f"{kind}_mem") if prev is not None else None
                cur = self._substitute(raw, prev_cur, aliased)
                mem = self._memory_view(i, kind, raw, codecs.get(i), aliased, ae_training, aux)
                if aliased:
                    mem = self._substitute(mem, prev_mem, aliased)
                    if aux is not None:
                        for h in aliased:
                            cols = self._head_cols(h)
                            aux.reuse.append((i, h, kind, raw[..., cols], prev_cur[..., cols]))
                eff[kind] = (mem, cur)
            layer_kv = LayerKV(eff["k"][0], eff["v"][0], eff["k"][1], eff["v"][1])
            x = x + self._attend(i, q, layer_kv, 0)
            x = x + self._ffn(i, x)
            prev = layer_kv
        return self._logits(x)

    def _memory_view(self, i, kind, raw: Tensor, codec: CodecSpec | None, aliased, training, aux) -> Tensor:
        if codec is None or not codec.compressed:
            return raw
        live = [h for h in range(self.cfg.n_heads) if h not in aliased]
        if not live:
            return raw
        B, Tn, D = raw.shape
        if aliased:
            sl = T.concat([raw[..., self._head_cols(h)] for h in live], axis=-1)
        else:
            sl = raw
        w = sl.shape[-1]
        rec = T.reshape(codec.roundtrip(kind, T.reshape(sl, (B * Tn, w)), training), (B, Tn, w))
        if aux is not None:
            aux.recon.append((i, kind, sl, rec))
        if not aliased:
            return rec
        dk = self.cfg.head_dim
        parts, j = [], 0
        for h in range(self.cfg.n_heads):
            if h in live:
                parts.append(rec[..., j * dk : (j + 1) * dk])
                j += 1
            else:
                parts.append(raw[..., self._head_cols(h)])  # overwritten by the caller
        return T.concat(parts, axis=-1)

    # ------------------------------------------------------------ cached route

    def new_cache(self, codecs=None, plan=None, memoize_decoded: bool = False) -> KVCache:
        return KVCache(self.cfg, codecs, plan, memoize_decoded)

    def mha(self, x: Tensor, layer_idx: int, cache: KVCache, prev: LayerKV | None = None):
        """Attention sub-block (with its own pre-layernorm) for single-stream rows ``x[t, D]``.

        Returns ``(output[t, D], LayerKV)``; the LayerKV feeds the next layer's aliased heads.
        """
        if not 0 <= layer_idx < self.cfg.n_layers:
            raise IndexError(f"layer {layer_idx} out of range")
        offset = cache.length(layer_idx)
        q, k, v = self._project(layer_idx, x)
        cache.append(layer_idx, k.data, v.data)
        k_mem, v_mem = cache.read(layer_idx)
        cur = {}
        for kind, raw in (("k", k), ("v", v)):
            aliased = [h for h in range(self.cfg.n_heads) if cache.plan.is_aliased(layer_idx, h, kind)]
            prev_cur = getattr(prev, f"{kind}_cur") if prev is not None else None
            cur[kind] = self._substitute(raw, prev_cur, aliased)
        kv = LayerKV(k_mem, v_mem, cur["k"], cur["v"])
        return self._attend(layer_idx, q, kv, offset), kv

    def _run_cached(self, tokens: np.ndarray, cache: KVCache) -> Tensor:
        start = len(cache)
        with T.no_grad():
            x = self._embed(tokens, start)
            prev = None
            for i in range(self.cfg.n_layers):
                attn, prev = self.mha(x, i, cache, prev)
                x = x + attn
                x = x + self._ffn(i, x)
            return self._logits(x)

    def prefill(self, tokens, cache: KVCache) -> Tensor:
        """Run the whole prompt, filling ``cache``; returns logits ``[t, V]``."""
        tokens = np.asarray(tokens).reshape(-1)
        if len(cache):
            raise ValueError("prefill needs an empty cache")
        if not 1 <= len(tokens) <= self.cfg.max_seq:
            raise ValueError(f"prompt length {len(tokens)} outside [1, {self.cfg.max_seq}]")
        return self._run_cached(tokens, cache)

    def decode_step(self, token: int, cache: KVCache) -> Tensor:
        """One-token forward against the cache; returns logits ``[1, V]``."""
        if len(cache) >= self.cfg.max_seq:
            raise ValueError(f"cache already holds max_seq={self.cfg.max_seq} positions")
        return self._run_cached(np.asarray([int(token)]), cache)

    def generate(self, prompt, n_new: int, cache: KVCache | None = None) -> list[int]:
        """Greedy continuation of ``prompt``."""
        cache = cache or self.new_cache()
        logits = self.prefill(prompt, cache)
        out = []
        for _ in range(n_new):
            nxt = int(np.argmax(logits.data[-1]))
            out.append(nxt)
            if len(out) == n_new or len(cache) >= self.cfg.max_seq:
                break
            logits = self.decode_step(nxt, cache)
        return out
