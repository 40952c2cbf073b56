"""Per-layer KV cache with encode-on-append / decode-on-read codecs and head aliasing.

Storage is organised per (layer, K-or-V). The *live* heads of a layer are the
ones not aliased to the previous layer; only their slices are stored. With an
autoencoder codec the live slices are concatenated and encoded together, so
the autoencoder for a layer with ``a`` aliased heads maps
``(h - a) * D/h -> (h - a) * d/h``. Byte accounting is per head slot:

    bytes = sum over (layer, K/V, live head) of P * seq_len * batch * stored_dim / h

which collapses to ``2 * P * L * D * seq_len * batch`` with no compression.
Int8 storage charges one byte per element plus a 6-byte (scale, zeropoint)
header per stored row.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from . import quantizer
from . import tensor as T
from .autoencoder import Autoencoder, AutoencoderConfig
from .tensor import Tensor

KINDS = ("k", "v")
CODEC_KINDS = ("identity", "autoencoder", "autoencoder_int8")
_CODEC_ID = {name: i for i, name in enumerate(CODEC_KINDS)}


class CacheConsistencyError(RuntimeError):
    pass


# ---------------------------------------------------------------- reuse plan


@dataclass(frozen=True)
class ReusePlan:
    """Slots ``(layer, head, kind)`` served from the same slot of ``layer - 1``."""

    n_layers: int
    n_heads: int
    slots: frozenset = frozenset()

    def __post_init__(self):
        slots = frozenset((int(l), int(h), str(k)) for l, h, k in self.slots)
        for l, h, k in slots:
            if not 1 <= l < self.n_layers:
                raise ValueError(f"layer {l} cannot alias (valid layers are 1..{self.n_layers - 1})")
            if not 0 <= h < self.n_heads:
                raise ValueError(f"head {h} out of range")
            if k not in KINDS:
                raise ValueError(f"slot kind must be 'k' or 'v', got {k!r}")
        object.__setattr__(self, "slots", slots)

    @classmethod
    def empty(cls, n_layers: int, n_heads: int) -> "ReusePlan":
        return cls(n_layers, n_heads)

    @classmethod
    def full(cls, n_layers, n_heads, layers=None, kinds=KINDS) -> "ReusePlan":
        layers = range(1, n_layers) if layers is None else layers
        return cls(n_layers, n_heads, frozenset((l, h, k) for l in layers for h in range(n_heads) for k in kinds))

    def is_aliased(self, layer: int, head: int, kind: str) -> bool:
        return (layer, head, kind) in self.slots

    def live_heads(self, layer: int, kind: str) -> list[int]:
        return [h for h in range(self.n_heads) if (layer, h, kind) not in self.slots]

    def count(self, kind: str | None = None) -> int:
        return sum(1 for s in self.slots if kind is None or s[2] == kind)

    def __len__(self) -> int:
        return len(self.slots)

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "slots": [list(s) for s in sorted(self.slots)],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ReusePlan":
        return cls(d["n_layers"], d["n_heads"], frozenset(tuple(s) for s in d["slots"]))

    def bitmap(self) -> np.ndarray:
        """uint8 array [L, h, 2]; 1 where the slot is aliased (K at index 0)."""
        bm = np.zeros((self.n_layers, self.n_heads, 2), dtype=np.uint8)
        for l, h, k in self.slots:
            bm[l, h, KINDS.index(k)] = 1
        return bm

    @classmethod
    def from_bitmap(cls, bm: np.ndarray) -> "ReusePlan":
        L, h, _ = bm.shape
        return cls(L, h, frozenset((int(l), int(j), KINDS[int(k)]) for l, j, k in zip(*np.nonzero(bm))))


# ---------------------------------------------------------------- codecs


@dataclass(eq=False)
class CodecSpec:
    """Codec attached to one layer.

    ``latent_dim`` is the full-row latent width d (stored_dim). ``k`` and
    ``v`` are the layer's autoencoders; with aliased heads they operate on
    the live slices only.
    """

    kind: str = "identity"
    latent_dim: int | None = None
    k: Autoencoder | None = None
    v: Autoencoder | None = None

    def __post_init__(self):
        if self.kind not in CODEC_KINDS:
            raise ValueError(f"unknown codec kind {self.kind!r}")
        if self.kind != "identity" and self.latent_dim is None:
            raise ValueError(f"{self.kind} codec needs a latent_dim")

    @property
    def compressed(self) -> bool:
        return self.kind != "identity"

    @property
    def quantized(self) -> bool:
        return self.kind == "autoencoder_int8"

    def stored_dim(self, d_model: int) -> int:
        return d_model if self.kind == "identity" else self.latent_dim

    def autoencoder(self, kind: str) -> Autoencoder | None:
        return self.k if kind == "k" else self.v

    def with_kind(self, kind: str) -> "CodecSpec":
        return CodecSpec(kind, self.latent_dim, self.k, self.v)

    def roundtrip(self, kind: str, x: Tensor, training: bool = False) -> Tensor:
        """Differentiable store-then-load view of rows ``x`` (grad stops at int8)."""
        if self.kind == "identity":
            return x
        ae = self.autoencoder(kind)
        z = ae.encode(x, training)
        if self.quantized:
            q, s, zp = quantizer.quantize_rows(z.data)
            z = Tensor(quantizer.dequantize_rows(q, s, zp))
        return ae.decode(z, training)


def make_codec(
    layer: int,
    d_model: int,
    n_heads: int,
    latent_dim: int,
    plan: ReusePlan | None = None,
    kind: str = "autoencoder",
    hidden: int | None = None,
    rng=None,
) -> CodecSpec:
    """Fresh K and V autoencoders sized for the layer's live heads."""
    if latent_dim % n_heads:
        raise ValueError(f"latent_dim {latent_dim} must be divisible by n_heads {n_heads}")
    rng = np.random.default_rng(rng)
    dk, dl = d_model // n_heads, latent_dim // n_heads
    aes = {}
    for kv in KINDS:
        live = n_heads if plan is None else len(plan.live_heads(layer, kv))
        if live == 0:
            aes[kv] = None
            continue
        if hidden is None:
            cfg = AutoencoderConfig(live * dk, live * dl)
        else:
            cfg = AutoencoderConfig(live * dk, live * dl, hidden * live // n_heads)
        aes[kv] = Autoencoder(cfg, rng)
    return CodecSpec(kind, latent_dim, aes["k"], aes["v"])


# ---------------------------------------------------------------- layout and accounting


@dataclass(frozen=True)
class SlotGroup:
    """What one (layer, K-or-V) stores: codec kind, stored width per head, live heads."""

    codec: str
    stored_head_dim: int
    live_heads: tuple[int, ...]

    @property
    def row_width(self) -> int:
        return self.stored_head_dim * len(self.live_heads)


@dataclass(frozen=True)
class CacheLayout:
    n_layers: int
    n_heads: int
    d_model: int
    groups: tuple  # groups[layer] = (SlotGroup for K, SlotGroup for V)

    @classmethod
    def build(
        cls,
        n_layers: int,
        n_heads: int,
        d_model: int,
        latent_dims: Mapping[int, int] | None = None,
        plan: ReusePlan | None = None,
        quantized: Iterable[int] | bool = (),
    ) -> "CacheLayout":
        if d_model % n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        latent_dims = dict(latent_dims or {})
        if quantized is True:
            quantized = set(latent_dims)
        quantized = set(quantized or ())
        if not quantized <= set(latent_dims):
            raise ValueError("int8 storage is only stacked on autoencoder layers")
        plan = plan if plan is not None else ReusePlan.empty(n_layers, n_heads)
        groups = []
        for layer in range(n_layers):
            d = latent_dims.get(layer)
            if d is None:
                codec, width = "identity", d_model
            else:
                if not 1 <= d <= d_model or d % n_heads:
                    raise ValueError(f"layer {layer}: latent {d} must be in [1, {d_model}] and divisible by {n_heads}")
                codec = "autoencoder_int8" if layer in quantized else "autoencoder"
                width = d
            groups.append(
                tuple(SlotGroup(codec, width // n_heads, tuple(plan.live_heads(layer, kv))) for kv in KINDS)
            )
        return cls(n_layers, n_heads, d_model, tuple(groups))

    @classmethod
    def from_codecs(cls, n_layers, n_heads, d_model, codecs: Mapping[int, CodecSpec] | None, plan=None):
        codecs = codecs or {}
        latents = {l: c.latent_dim for l, c in codecs.items() if c.compressed}
        quant = [l for l, c in codecs.items() if c.quantized]
        return cls.build(n_layers, n_heads, d_model, latents, plan, quant)

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class CacheStats:
    bytes_per_layer: tuple[int, ...]
    total_bytes: int
    baseline_bytes: int

    @property
    def savings_fraction(self) -> float:
        if self.baseline_bytes == 0:
            return 0.0
        return 1.0 - self.total_bytes / self.baseline_bytes

    @property
    def savings_percent(self) -> float:
        return 100.0 * self.savings_fraction


def _check_p(P: int) -> None:
    if P not in (1, 2, 4):
        raise ValueError(f"bytes per element must be 1, 2 or 4, got {P}")


def bytes_used(layout: CacheLayout, seq_len: int, batch: int, P: int) -> CacheStats:
    """Closed-form cache footprint for ``batch`` sequences of ``seq_len`` tokens."""
    _check_p(P)
    if seq_len < 0 or batch < 0:
        raise ValueError("seq_len and batch must be non-negative")
    rows = seq_len * batch
    per_layer = []
    for groups in layout.groups:
        n = 0
        for g in groups:
            if not g.live_heads:
                continue
            if g.codec == "autoencoder_int8":
                n += rows * (g.row_width + quantizer.HEADER_BYTES)
            else:
                n += rows * P * g.row_width
        per_layer.append(n)
    baseline = 2 * P * layout.n_layers * layout.d_model * seq_len * batch
    return CacheStats(tuple(per_layer), sum(per_layer), baseline)


def dense_kv_bytes(P: int, n_layers: int, d_model: int, seq_len: int, batch: int) -> int:
    """Uncompressed KV footprint: 2 * P * layers * d_model * seq_len * batch."""
    return 2 * P * n_layers * d_model * seq_len * batch


def savings_report(
    n_layers: int,
    n_heads: int,
    d_model: int,
    latent_dims: Mapping[int, int] | None = None,
    plan: ReusePlan | None = None,
    quantized: Iterable[int] | bool = (),
    P: int = 2,
) -> dict[str, CacheStats]:
    """Savings of the reuse plan alone, the autoencoders alone, and both together."""
    quantized = set(latent_dims or {}) if quantized is True else set(quantized or ())

    def stats(lat, pl):
        q = [l for l in quantized if l in (lat or {})]
        return bytes_used(CacheLayout.build(n_layers, n_heads, d_model, lat, pl, q), 1, 1, P)

    return {
        "reuse_only": stats(None, plan),
        "autoencoder_only": stats(latent_dims, None),
        "combined": stats(latent_dims, plan),
    }


# ---------------------------------------------------------------- storage


class _Store:
    """Growable row buffer: float32 rows, or int8 rows with per-row scale/zeropoint."""

    def __init__(self, width: int, quantized: bool, capacity: int = 16):
        self.width = width
        self.quantized = quantized
        self.n = 0
        dtype = np.int8 if quantized else np.float32
        self.rows = np.zeros((capacity, width), dtype=dtype)
        self.scale = np.zeros(capacity if quantized else 0, dtype=np.float32)
        self.zp = np.zeros(capacity if quantized else 0, dtype=np.int16)

    def _grow(self, need: int) -> None:
        cap = len(self.rows)
        if need <= cap:
            return
        while cap < need:
            cap *= 2
        self.rows = np.resize(self.rows, (cap, self.width)) if self.width else np.zeros((cap, 0), self.rows.dtype)
        if self.quantized:
            self.scale = np.resize(self.scale, cap)
            self.zp = np.resize(self.zp, cap)

    def append(self, rows: np.ndarray) -> None:
        m = len(rows)
        self._grow(self.n + m)
        if self.quantized:
            q, s, z = quantizer.quantize_rows(rows)
            self.rows[self.n : self.n + m] = q
            self.scale[self.n : self.n + m] = s
            self.zp[self.n : self.n + m] = z
        else:
            self.rows[self.n : self.n + m] = rows
        self.n += m

    def values(self, start: int = 0) -> np.ndarray:
        """Stored rows as float (dequantized for int8)."""
        if self.quantized:
            return quantizer.dequantize_rows(
                self.rows[start : self.n], self.scale[start : self.n], self.zp[start : self.n]
            )
        return self.rows[start : self.n]

    @property
    def nbytes_payload(self) -> int:
        return self.n * self.width * (1 if self.quantized else 4)

    def element_count(self) -> int:
        return self.n * self.width


class LayerCache:
    def __init__(self, layer: int, d_model: int, n_heads: int, codec: CodecSpec, plan: ReusePlan, memoize: bool):
        self.layer = layer
        self.d_model = d_model
        self.n_heads = n_heads
        self.codec = codec
        self.live = {kv: plan.live_heads(layer, kv) for kv in KINDS}
        self.memoize = memoize
        self.positions = 0
        dk = d_model // n_heads
        head_w = codec.stored_dim(d_model) // n_heads
        self.stores = {kv: _Store(head_w * len(self.live[kv]), codec.quantized) for kv in KINDS}
        self._cols = {kv: np.concatenate([np.arange(h * dk, (h + 1) * dk) for h in self.live[kv]]).astype(int)
                      if self.live[kv] else np.zeros(0, dtype=int) for kv in KINDS}
        self._memo = {kv: np.zeros((0, dk * len(self.live[kv])), dtype=np.float32) for kv in KINDS}
        if codec.compressed:
            for kv in KINDS:
                ae = codec.autoencoder(kv)
                live_w = dk * len(self.live[kv])
                if not self.live[kv]:
                    continue
                if ae is None:
                    raise ValueError(f"layer {layer}: missing {kv.upper()} autoencoder")
                want = (live_w, head_w * len(self.live[kv]))
                if (ae.cfg.d_in, ae.cfg.latent) != want:
                    raise ValueError(
                        f"layer {layer}: {kv.upper()} autoencoder is {ae.cfg.d_in}->{ae.cfg.latent}, "
                        f"live heads need {want[0]}->{want[1]}"
                    )

    @property
    def K_store(self) -> _Store:
        return self.stores["k"]

    @property
    def V_store(self) -> _Store:
        return self.stores["v"]

    def _encode(self, kv: str, rows: np.ndarray) -> np.ndarray:
        if not self.codec.compressed:
            return rows
        with T.no_grad():
            return self.codec.autoencoder(kv).encode(Tensor(rows), training=False).data

    def _decode(self, kv: str, stored: np.ndarray) -> np.ndarray:
        if not self.codec.compressed:
            return stored
        if len(stored) == 0:
            return np.zeros((0, len(self._cols[kv])), dtype=np.float32)
        with T.no_grad():
            return self.codec.autoencoder(kv).decode(Tensor(stored), training=False).data

    def append(self, k_full: np.ndarray, v_full: np.ndarray) -> None:
        for kv, full in (("k", k_full), ("v", v_full)):
            if not self.live[kv]:
                continue
            rows = np.ascontiguousarray(full[:, self._cols[kv]], dtype=np.float32)
            store = self.stores[kv]
            start = store.n
            store.append(self._encode(kv, rows))
            if self.memoize:
                self._memo[kv] = np.concatenate([self._memo[kv], self._decode(kv, store.values(start))])
        self.positions += len(k_full)

    def decoded_live(self, kv: str) -> np.ndarray:
        if self.memoize:
            return self._memo[kv]
        return self._decode(kv, self.stores[kv].values())

    @property
    def bytes_used(self) -> int:
        """Bytes actually held in memory at 4-byte floats (int8: 1 byte + header per row)."""
        n = 0
        for s in self.stores.values():
            n += s.nbytes_payload
            if s.quantized and s.width:
                n += s.n * quantizer.HEADER_BYTES
        return n


class KVCache:
    """KV cache for one generation stream.

    ``config`` needs ``n_layers``, ``n_heads`` and ``d_model``. ``codecs``
    maps layer index to a :class:`CodecSpec`; missing layers use identity.
    """

    def __init__(self, config, codecs: Mapping[int, CodecSpec] | None = None,
                 plan: ReusePlan | None = None, memoize_decoded: bool = False):
        self.n_layers = config.n_layers
        self.n_heads = config.n_heads
        self.d_model = config.d_model
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.codecs = {i: (codecs or {}).get(i, CodecSpec()) for i in range(self.n_layers)}
        for i in (codecs or {}):
            if not 0 <= i < self.n_layers:
                raise IndexError(f"codec for layer {i} but the model has {self.n_layers} layers")
        self.plan = plan if plan is not None else ReusePlan.empty(self.n_layers, self.n_heads)
        if (self.plan.n_layers, self.plan.n_heads) != (self.n_layers, self.n_heads):
            raise ValueError("reuse plan was built for a different model shape")
        self.memoize_decoded = memoize_decoded
        self.layers = [
            LayerCache(i, self.d_model, self.n_heads, self.codecs[i], self.plan, memoize_decoded)
            for i in range(self.n_layers)
        ]

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def _check_layer(self, layer: int) -> LayerCache:
        if not 0 <= layer < self.n_layers:
            raise IndexError(f"layer {layer} out of range for {self.n_layers}-layer cache")
        return self.layers[layer]

    def length(self, layer: int = 0) -> int:
        return self._check_layer(layer).positions

    def __len__(self) -> int:
        return self.layers[0].positions if self.layers else 0

    def append(self, layer: int, k_full, v_full) -> None:
        lc = self._check_layer(layer)
        k = np.atleast_2d(np.asarray(getattr(k_full, "data", k_full), dtype=np.float32))
        v = np.atleast_2d(np.asarray(getattr(v_full, "data", v_full), dtype=np.float32))
        if k.shape != v.shape or k.shape[1] != self.d_model:
            raise T.ShapeError(f"append expects matching [n, {self.d_model}] K and V, got {k.shape}, {v.shape}")
        lc.append(k, v)

    def _read_kind(self, layer: int, kv: str, n: int) -> np.ndarray:
        lc = self.layers[layer]
        if lc.positions < n:
            raise CacheConsistencyError(
                f"layer {layer} holds {lc.positions} positions but {n} are needed by an aliased read"
            )
        out = np.empty((n, self.d_model), dtype=np.float32)
        live = lc.live[kv]
        if live:
            out[:, lc._cols[kv]] = lc.decoded_live(kv)[:n]
        if len(live) < self.n_heads:
            src = self._read_kind(layer - 1, kv, n)
            dk = self.head_dim
            for h in range(self.n_heads):
                if h not in live:
                    out[:, h * dk : (h + 1) * dk] = src[:, h * dk : (h + 1) * dk]
        return out

    def read(self, layer: int) -> tuple[Tensor, Tensor]:
        """Full-width decoded K and V for every cached position of ``layer``."""
        lc = self._check_layer(layer)
        n = lc.positions
        return Tensor(self._read_kind(layer, "k", n)), Tensor(self._read_kind(layer, "v", n))

    @property
    def layout(self) -> CacheLayout:
        return CacheLayout.from_codecs(self.n_layers, self.n_heads, self.d_model, self.codecs, self.plan)

    def stats(self, P: int, batch: int = 1) -> CacheStats:
        return bytes_used(self.layout, len(self), batch, P)

    def stored_elements(self) -> list[tuple[int, str, int, bool]]:
        """(layer, kind, element count, quantized) for every store, for accounting checks."""
        return [
            (lc.layer, kv, lc.stores[kv].element_count(), lc.stores[kv].quantized)
            for lc in self.layers
            for kv in KINDS
        ]

    # ------------------------------------------------------------ snapshots

    def save(self, path) -> None:
        write_snapshot(self, path)

    @classmethod
    def load(cls, path, config=None, codecs=None) -> "KVCache":
        return read_snapshot(path, config, codecs)


# Snapshot layout (little-endian):
#   b"KVCS" | u16 version | u32 header_len | header JSON (utf-8)
#   u8[L * h * 2] reuse bitmap (K at index 0 of the last axis)
#   per layer, K then V:
#       float store: float32[positions, width] row-major
#       int8 store:  per row: f32 scale | i16 zeropoint | int8[width]
SNAPSHOT_MAGIC = b"KVCS"
SNAPSHOT_VERSION = 1


def write_snapshot(cache: KVCache, path) -> None:
    header = {
        "n_layers": cache.n_layers,
        "n_heads": cache.n_heads,
        "d_model": cache.d_model,
        "layers": [
            {
                "codec": _CODEC_ID[lc.codec.kind],
                "latent_dim": lc.codec.latent_dim,
                "positions": lc.positions,
                "widths": [lc.stores[kv].width for kv in KINDS],
            }
            for lc in cache.layers
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(SNAPSHOT_MAGIC + struct.pack("<HI", SNAPSHOT_VERSION, len(blob)) + blob)
        f.write(cache.plan.bitmap().tobytes())
        for lc in cache.layers:
            for kv in KINDS:
                s = lc.stores[kv]
                if s.quantized:
                    rec = np.zeros(s.n, dtype=[("scale", "<f4"), ("zp", "<i2"), ("q", "i1", (s.width,))])
                    rec["scale"], rec["zp"], rec["q"] = s.scale[: s.n], s.zp[: s.n], s.rows[: s.n]
                    f.write(rec.tobytes())
                else:
                    f.write(s.rows[: s.n].astype("<f4").tobytes())


def read_snapshot(path, config=None, codecs: Mapping[int, CodecSpec] | None = None) -> KVCache:
    """Rebuild a cache from a snapshot; compressed layers need their ``codecs`` supplied."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != SNAPSHOT_MAGIC:
        raise ValueError("not a KV cache snapshot")
    version, hlen = struct.unpack_from("<HI", raw, 4)
    if version != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {version}")
    off = 10
    header = json.loads(raw[off : off + hlen])
    off += hlen
    L, h, D = header["n_layers"], header["n_heads"], header["d_model"]
    bm = np.frombuffer(raw, dtype=np.uint8, count=L * h * 2, offset=off).reshape(L, h, 2)
    off += L * h * 2
    plan = ReusePlan.from_bitmap(bm)
    codecs = dict(codecs or {})
    for i, meta in enumerate(header["layers"]):
        kind = CODEC_KINDS[meta["codec"]]
        if kind == "identity":
            codecs[i] = CodecSpec()
        elif i not in codecs or codecs[i].latent_dim != meta["latent_dim"]:
            raise ValueError(f"layer {i} was stored with a {kind} codec; supply matching autoencoders")
        else:
            codecs[i] = codecs[i].with_kind(kind)
    shape = config or _Shape(L, h, D)
    cache = KVCache(shape, codecs, plan)
    for lc, meta in zip(cache.layers, header["layers"]):
        n = meta["positions"]
        for kv, width in zip(KINDS, meta["widths"]):
            s = lc.stores[kv]
            if s.width != width:
                raise ValueError(f"layer {lc.layer}: stored width {width} != expected {s.width}")
            if not lc.live[kv]:
                continue
            s._grow(max(n, 1))
            if s.quantized:
                dt = np.dtype([("scale", "<f4"), ("zp", "<i2"), ("q", "i1", (width,))])
                rec = np.frombuffer(raw, dtype=dt, count=n, offset=off)
                s.rows[:n], s.scale[:n], s.zp[:n] = rec["q"], rec["scale"], rec["zp"]
                off += dt.itemsize * n
            else:
                s.rows[:n] = np.frombuffer(raw, dtype="<f4", count=n * width, offset=off).reshape(n, width)
                off += 4 * n * width
            s.n = n
            if lc.memoize:
                lc._memo[kv] = lc._decode(kv, s.values())
        lc.positions = n
    if off != len(raw):
        raise ValueError("trailing bytes in snapshot")
    return cache


@dataclass(frozen=True)
class _Shape:
    n_layers: int
    n_heads: int
    d_model: int
