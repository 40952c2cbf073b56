"""Training procedures: pretraining, two-stage autoencoder finetuning, head reuse.

All updates are plain SGD, ``theta -= lr * grad``. Frozen parameters have
``requires_grad`` switched off for the duration of a run and are restored
afterwards, so they are never touched.
"""

from __future__ import annotations

import contextlib
import csv
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import corpus as C
from . import tensor as T
from .kvcache import KINDS, CodecSpec, ReusePlan, make_codec
from .model import ForwardAux, TransformerModel
from .tensor import Tensor

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "ce", "l1", "total", "lr")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.1
    batch_size: int = 16
    epochs: int = 1
    l1_scale: float = 1.0
    selected_layers: tuple[int, ...] = ()
    seed: int = 0
    seq_len: int = 32
    max_steps: int | None = None
    eval_windows: int = 32

    def __post_init__(self):
        self.selected_layers = tuple(int(l) for l in self.selected_layers)
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.l1_scale < 0:
            raise ValueError("l1_scale must be non-negative")
        for name in ("batch_size", "epochs", "seq_len", "eval_windows"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")

    def check_layers(self, n_layers: int) -> None:
        bad = [l for l in self.selected_layers if not 0 <= l < n_layers]
        if bad:
            raise ValueError(f"selected_layers {bad} outside [0, {n_layers})")


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def add(self, step, ce, l1, total, lr) -> None:
        self.rows.append({"step": step, "ce": float(ce), "l1": float(l1), "total": float(total), "lr": lr})

    def write_csv(self, path, append: bool = True) -> None:
        new = not (append and os.path.exists(path))
        with open(path, "a" if append else "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=LOG_FIELDS)
            if new:
                w.writeheader()
            w.writerows(self.rows)

    @property
    def totals(self) -> list[float]:
        return [r["total"] for r in self.rows]


@contextlib.contextmanager
def frozen(model: TransformerModel):
    flags = {k: t.requires_grad for k, t in model.params.items()}
    model.set_trainable(False)
    try:
        yield
    finally:
        for k, t in model.params.items():
            t.requires_grad = flags[k]


def _train_loop(objective, params: list[Tensor], tokens, cfg: TrainConfig, tag: str) -> TrainLog:
    """Run SGD epochs over shuffled windows; ``objective(x, y)`` returns (total, ce, l1)."""
    rng = np.random.default_rng(cfg.seed)
    history = TrainLog()
    for p in params:
        p.zero_grad()
    step = 0
    for epoch in range(cfg.epochs):
        for x, y in C.batches(tokens, cfg.seq_len, cfg.batch_size, rng):
            try:
                total, ce, l1 = objective(x, y)
                T.backward(total)
            except T.NonFiniteError as exc:
                raise TrainingDiverged(f"{tag}: non-finite value at step {step} (epoch {epoch}): {exc}") from exc
            T.optimizer_step(params, cfg.lr)
            history.add(step, ce, l1, total.item(), cfg.lr)
            if step % 50 == 0:
                log.debug("%s step %d ce %.4f l1 %.4f total %.4f", tag, step, float(ce), float(l1), total.item())
            step += 1
            if cfg.max_steps is not None and step >= cfg.max_steps:
                return history
    return history


def eval_batch(tokens, cfg: TrainConfig):
    """A fixed (unshuffled) batch used to compare losses before and after a run."""
    win = C.windows(tokens, cfg.seq_len)[: cfg.eval_windows]
    return win[:, :-1], win[:, 1:]


# ---------------------------------------------------------------- pretraining


def lm_objective(model: TransformerModel, x, y):
    ce = T.cross_entropy(model.forward(x), y)
    return ce, ce.item(), 0.0


def pretrain(model: TransformerModel, tokens, cfg: TrainConfig) -> TrainLog:
    """Next-byte cross-entropy training of every model parameter."""
    model.set_trainable(True)
    return _train_loop(lambda x, y: lm_objective(model, x, y), model.parameters(), tokens, cfg, "pretrain")


# ---------------------------------------------------------------- autoencoders


def ae_objective(
    model: TransformerModel,
    codecs: Mapping[int, CodecSpec],
    x,
    y,
    l1_scale: float,
    training: bool,
    plan: ReusePlan | None = None,
):
    """CE + l1_scale * sum over codec layers of (L1_K + L1_V) between raw and reconstructed keys/values."""
    aux = ForwardAux()
    logits = model.forward(x, codecs=codecs, plan=plan, ae_training=training, aux=aux)
    ce = T.cross_entropy(logits, y)
    l1 = None
    for _layer, _kind, raw, rec in aux.recon:
        term = T.l1_loss(rec, raw)
        l1 = term if l1 is None else l1 + term
    if l1 is None:
        return ce, ce.item(), 0.0
    return ce + l1 * l1_scale, ce.item(), l1.item()


def _ae_params(codecs: Iterable[CodecSpec]) -> list[Tensor]:
    out = []
    for c in codecs:
        for kv in KINDS:
            ae = c.autoencoder(kv)
            if ae is not None:
                out.extend(ae.parameters())
    return out


def reconstruction_error(model: TransformerModel, codecs, x, plan=None) -> dict[int, float]:
    """Eval-mode mean |K - K'| + |V - V'| per codec layer on windows ``x``."""
    aux = ForwardAux()
    with T.no_grad():
        model.forward(x, codecs=codecs, plan=plan, ae_training=False, aux=aux)
    out: dict[int, float] = {}
    for layer, _kind, raw, rec in aux.recon:
        out[layer] = out.get(layer, 0.0) + float(np.abs(rec.data - raw.data).mean())
    return out


@dataclass
class Stage1Result:
    layer: int
    codec: CodecSpec
    recon_init: float
    recon_final: float
    ce_baseline: float
    ce_final: float
    history: TrainLog


def train_ae_stage1(
    model: TransformerModel,
    layer: int,
    tokens,
    cfg: TrainConfig,
    latent_dim: int | None = None,
    codec: CodecSpec | None = None,
    plan: ReusePlan | None = None,
    eval_tokens=None,
) -> Stage1Result:
    """Train one layer's K/V autoencoders with every model parameter frozen."""
    if not 0 <= layer < model.cfg.n_layers:
        raise ValueError(f"layer {layer} outside [0, {model.cfg.n_layers})")
    if codec is None:
        if latent_dim is None:
            raise ValueError("give either latent_dim or an initial codec")
        codec = make_codec(layer, model.cfg.d_model, model.cfg.n_heads, latent_dim, plan, rng=cfg.seed + layer)
    codecs = {layer: codec}
    ex, ey = eval_batch(tokens if eval_tokens is None else eval_tokens, cfg)
    with frozen(model):
        ce_base = _eval_ce(model, ex, ey, plan=plan)
        r0 = reconstruction_error(model, codecs, ex, plan)[layer]
        history = _train_loop(
            lambda x, y: ae_objective(model, codecs, x, y, cfg.l1_scale, True, plan),
            _ae_params([codec]),
            tokens,
            cfg,
            f"stage1[layer {layer}]",
        )
        r1 = reconstruction_error(model, codecs, ex, plan)[layer]
        ce1 = _eval_ce(model, ex, ey, codecs, plan)
    log.info("stage1 layer %d: recon %.4f -> %.4f, ce %.4f (baseline %.4f)", layer, r0, r1, ce1, ce_base)
    return Stage1Result(layer, codec, r0, r1, ce_base, ce1, history)


def train_all_stage1(model, layers, tokens, cfg: TrainConfig, latent_dim: int, plan=None, eval_tokens=None):
    """Stage 1 for each selected layer in turn; each layer's autoencoders are trained alone."""
    return {l: train_ae_stage1(model, l, tokens, cfg, latent_dim, plan=plan, eval_tokens=eval_tokens) for l in layers}


def _eval_ce(model, x, y, codecs=None, plan=None) -> float:
    with T.no_grad():
        return T.cross_entropy(model.forward(x, codecs=codecs, plan=plan), y).item()


@dataclass
class Stage2Result:
    codecs: dict[int, CodecSpec]
    start_loss: float
    end_loss: float
    start_ce: float
    end_ce: float
    history: TrainLog

    @property
    def start_ppl(self) -> float:
        return math.exp(self.start_ce)

    @property
    def end_ppl(self) -> float:
        return math.exp(self.end_ce)


def train_ae_stage2(
    model: TransformerModel,
    stage1: Mapping[int, CodecSpec],
    tokens,
    cfg: TrainConfig,
    plan: ReusePlan | None = None,
    eval_tokens=None,
) -> Stage2Result:
    """Jointly finetune the stage-1 autoencoders of ``cfg.selected_layers``.

    Loss is CE + l1_scale * sum of per-layer reconstruction L1 terms. Start
    and end losses are measured in eval mode on a fixed held-out batch.
    """
    cfg.check_layers(model.cfg.n_layers)
    missing = [l for l in cfg.selected_layers if l not in stage1]
    if missing:
        raise KeyError(f"no stage-1 autoencoders for layers {missing}")
    codecs = {l: stage1[l] for l in cfg.selected_layers}
    ex, ey = eval_batch(tokens if eval_tokens is None else eval_tokens, cfg)

    def measure():
        with T.no_grad():
            total, ce, _ = ae_objective(model, codecs, ex, ey, cfg.l1_scale, False, plan)
        return total.item(), ce

    with frozen(model):
        start_loss, start_ce = measure()
        if codecs:
            history = _train_loop(
                lambda x, y: ae_objective(model, codecs, x, y, cfg.l1_scale, True, plan),
                _ae_params(codecs.values()),
                tokens,
                cfg,
                "stage2",
            )
        else:
            history = TrainLog()
        end_loss, end_ce = measure()
    log.info("stage2: loss %.4f -> %.4f, ppl %.3f -> %.3f", start_loss, end_loss, math.exp(start_ce), math.exp(end_ce))
    return Stage2Result(codecs, start_loss, end_loss, start_ce, end_ce, history)


# ---------------------------------------------------------------- head reuse


@dataclass
class HeadStats:
    """Mean absolute K/V difference between same-index heads of adjacent layers.

    ``distances[n - 1, head, kind]`` compares layer ``n`` with ``n - 1``
    (kind 0 = K, 1 = V); ``counts`` holds the element counts behind each mean.
    """

    distances: np.ndarray
    counts: np.ndarray
    n_batches: int = 0

    @property
    def n_layers(self) -> int:
        return self.distances.shape[0] + 1

    @property
    def n_heads(self) -> int:
        return self.distances.shape[1]

    def distance(self, layer: int, head: int, kind: str) -> float:
        return float(self.distances[layer - 1, head, KINDS.index(kind)])

    def slots(self) -> list[tuple[float, int, int, str]]:
        """(distance, layer, head, kind) sorted by distance, then layer, head, K before V."""
        out = [
            (float(self.distances[n - 1, h, j]), n, h, kv)
            for n in range(1, self.n_layers)
            for h in range(self.n_heads)
            for j, kv in enumerate(KINDS)
        ]
        out.sort(key=lambda s: (s[0], s[1], s[2], KINDS.index(s[3])))
        return out

    def merge(self, other: "HeadStats") -> "HeadStats":
        n = self.counts + other.counts
        d = np.where(n > 0, (self.distances * self.counts + other.distances * other.counts) / np.maximum(n, 1), 0.0)
        return HeadStats(d, n, self.n_batches + other.n_batches)

    def to_dict(self) -> dict:
        return {"distances": self.distances.tolist(), "counts": self.counts.tolist(), "n_batches": self.n_batches}

    @classmethod
    def from_dict(cls, d: Mapping) -> "HeadStats":
        distances = np.asarray(d["distances"], dtype=np.float64)
        return cls(distances, np.asarray(d["counts"], dtype=np.int64), d["n_batches"])


def head_stats_from_kv(ks: list[np.ndarray], vs: list[np.ndarray], n_heads: int) -> HeadStats:
    """Stats for one minibatch from per-layer K and V arrays of shape [..., D]."""
    L = len(ks)
    dk = ks[0].shape[-1] // n_heads
    dist = np.zeros((L - 1, n_heads, 2))
    counts = np.zeros((L - 1, n_heads, 2), dtype=np.int64)
    for n in range(1, L):
        for j, arrs in enumerate((ks, vs)):
            diff = np.abs(arrs[n].astype(np.float64) - arrs[n - 1].astype(np.float64))
            diff = diff.reshape(*diff.shape[:-1], n_heads, dk)
            per_head = diff.reshape(-1, n_heads, dk)
            dist[n - 1, :, j] = per_head.mean(axis=(0, 2))
            counts[n - 1, :, j] = per_head.shape[0] * dk
    return HeadStats(dist, counts, 1)


def collect_head_stats(model: TransformerModel, tokens, seq_len: int = 32, batch_size: int = 16) -> HeadStats:
    """One pass over the windows of ``tokens`` with the identity codec."""
    if model.cfg.n_layers < 2:
        raise ValueError("head reuse needs at least two layers")
    if len(tokens) == 0:
        raise ValueError("empty corpus")
    total = None
    for x, _ in C.batches(tokens, seq_len, batch_size):
        aux = ForwardAux()
        with T.no_grad():
            model.forward(x, aux=aux)
        s = head_stats_from_kv([k.data for k in aux.k], [v.data for v in aux.v], model.cfg.n_heads)
        total = s if total is None else total.merge(s)
    return total


def build_reuse_plan(stats: HeadStats, threshold: float) -> ReusePlan:
    """Alias every slot whose mean distance is at most ``threshold``."""
    return ReusePlan(
        stats.n_layers,
        stats.n_heads,
        frozenset((n, h, kv) for d, n, h, kv in stats.slots() if d <= threshold),
    )


def plan_from_percentile(stats: HeadStats, percentile: float) -> ReusePlan:
    """Alias the ``percentile`` % of eligible slots with the smallest distances."""
    if not 0 <= percentile <= 100:
        raise ValueError("percentile must be in [0, 100]")
    slots = stats.slots()
    k = int(round(percentile / 100.0 * len(slots)))
    return ReusePlan(stats.n_layers, stats.n_heads, frozenset((n, h, kv) for _, n, h, kv in slots[:k]))


def reuse_objective(model, plan: ReusePlan, x, y, l1_scale: float, codecs=None):
    """CE + l1_scale * mean over aliased slots of L1(own projection, reused tensor)."""
    aux = ForwardAux()
    logits = model.forward(x, codecs=codecs, plan=plan, aux=aux)
    ce = T.cross_entropy(logits, y)
    if not aux.reuse or l1_scale == 0:
        return ce, ce.item(), 0.0
    l1 = None
    for _n, _h, _kind, own, reused in aux.reuse:
        term = T.l1_loss(own, reused)
        l1 = term if l1 is None else l1 + term
    l1 = l1 * (1.0 / len(aux.reuse))
    return ce + l1 * l1_scale, ce.item(), l1.item()


@dataclass
class ReuseResult:
    plan: ReusePlan
    start_ce: float
    end_ce: float
    baseline_ce: float
    history: TrainLog


def finetune_reuse(
    model: TransformerModel, plan: ReusePlan, tokens, cfg: TrainConfig, eval_tokens=None, codecs=None
) -> ReuseResult:
    """Finetune every model parameter with ``plan`` fixed."""
    ex, ey = eval_batch(tokens if eval_tokens is None else eval_tokens, cfg)
    baseline = _eval_ce(model, ex, ey, codecs)
    start = _eval_ce(model, ex, ey, codecs, plan)
    model.set_trainable(True)
    history = _train_loop(
        lambda x, y: reuse_objective(model, plan, x, y, cfg.l1_scale, codecs),
        model.parameters(),
        tokens,
        cfg,
        "reuse",
    )
    end = _eval_ce(model, ex, ey, codecs, plan)
    log.info("reuse finetune (%d slots): ce %.4f -> %.4f (no-reuse baseline %.4f)", len(plan), start, end, baseline)
    return ReuseResult(plan, start, end, baseline, history)
