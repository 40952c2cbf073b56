"""Analytic memory planner: how long a context fits at each batch size.

All KV byte counts come from :func:`kvcar.kvcache.bytes_used`; the planner
adds model weights and a fixed overhead and inverts for sequence length.
Activation memory is not modelled.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .kvcache import CacheLayout, ReusePlan, bytes_used, dense_kv_bytes


@dataclass(frozen=True)
class Scheme:
    """A compression recipe: per-layer latent widths, a reuse plan, int8 layers."""

    name: str
    latent_dims: tuple[tuple[int, int], ...] = ()
    plan: ReusePlan | None = None
    quantized: tuple[int, ...] = ()

    @classmethod
    def identity(cls) -> "Scheme":
        return cls("identity")

    @classmethod
    def uniform(cls, compression: float, n_layers: int, n_heads: int, d_model: int, name: str | None = None):
        """Every layer stores ``d = d_model * (1 - compression)``."""
        if not 0 <= compression < 1:
            raise ValueError("compression must be in [0, 1)")
        if compression == 0:
            return cls(name or "identity")
        d = d_model * (1 - compression)
        if abs(d - round(d)) > 1e-9 or round(d) % n_heads:
            raise ValueError(
                f"compression {compression} gives latent {d:g}, which must be an integer multiple of n_heads={n_heads}"
            )
        return cls(name or f"{compression:g}", tuple((l, int(round(d))) for l in range(n_layers)))

    def layout(self, n_layers: int, n_heads: int, d_model: int) -> CacheLayout:
        return CacheLayout.build(n_layers, n_heads, d_model, dict(self.latent_dims), self.plan, self.quantized)


@dataclass(frozen=True)
class MemoryQuery:
    n_layers: int
    d_model: int
    n_heads: int
    P: int
    budget_bytes: int
    weight_bytes: int = 0
    overhead_bytes: int = 0
    scheme: Scheme = field(default_factory=Scheme.identity)

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.P not in (1, 2, 4):
            raise ValueError(f"bytes per element must be 1, 2 or 4, got {self.P}")
        if self.budget_bytes < 0 or self.weight_bytes < 0 or self.overhead_bytes < 0:
            raise ValueError("memory amounts must be non-negative")

    @property
    def fixed_bytes(self) -> int:
        return self.weight_bytes + self.overhead_bytes

    def with_scheme(self, scheme: Scheme) -> "MemoryQuery":
        return MemoryQuery(self.n_layers, self.d_model, self.n_heads, self.P, self.budget_bytes,
                           self.weight_bytes, self.overhead_bytes, scheme)

    def layout(self) -> CacheLayout:
        return self.scheme.layout(self.n_layers, self.n_heads, self.d_model)


GPT2_MEDIUM = dict(n_layers=24, d_model=1024, n_heads=16, P=2, weight_bytes=690_000_000)


def kv_bytes(query: MemoryQuery, seq_len: int, batch: int) -> int:
    return bytes_used(query.layout(), seq_len, batch, query.P).total_bytes


def max_seq(query: MemoryQuery, batch: int) -> int:
    """Largest ``seq_len`` with fixed + KV bytes within budget (0 if none)."""
    if batch < 1:
        raise ValueError("batch must be at least 1")
    avail = query.budget_bytes - query.fixed_bytes
    layout = query.layout()

    def fits(n):
        return bytes_used(layout, n, batch, query.P).total_bytes <= avail

    if avail <= 0 or not fits(1):
        return 0
    lo, hi = 1, 2
    while fits(hi):
        lo, hi = hi, hi * 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if fits(mid):
            lo = mid
        else:
            hi = mid
    return lo


@dataclass
class Frontier:
    curves: dict[str, list[tuple[int, int]]]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scheme", "batch", "max_seq"])
        for name, pts in self.curves.items():
            for b, s in sorted(pts):
                w.writerow([name, b, s])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            f.write(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "Frontier":
        curves: dict[str, list[tuple[int, int]]] = {}
        for row in csv.DictReader(io.StringIO(text)):
            curves.setdefault(row["scheme"], []).append((int(row["batch"]), int(row["max_seq"])))
        return cls(curves)


def frontier(query: MemoryQuery, batches: Sequence[int], schemes: Iterable[Scheme] | None = None) -> Frontier:
    """Max sequence length per batch size for each scheme (the query's own scheme if none given)."""
    if not batches:
        raise ValueError("batch list is empty")
    schemes = list(schemes) if schemes is not None else [query.scheme]
    names = [s.name for s in schemes]
    if len(set(names)) != len(names):
        raise ValueError("scheme names must be unique")
    curves = {}
    for s in schemes:
        q = query.with_scheme(s)
        curves[s.name] = [(b, max_seq(q, b)) for b in sorted(set(batches))]
    return Frontier(curves)


def savings_of(query: MemoryQuery) -> float:
    return bytes_used(query.layout(), 1, 1, query.P).savings_fraction


__all__ = [
    "GPT2_MEDIUM",
    "Frontier",
    "MemoryQuery",
    "Scheme",
    "dense_kv_bytes",
    "frontier",
    "kv_bytes",
    "max_seq",
    "savings_of",
]
