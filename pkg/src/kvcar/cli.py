"""Command-line entry point: ``kvcar <subcommand> [flags]``.

Every subcommand accepts ``--config file.json``; keys in the file use the
flag names with underscores (``latent_dim``), and flags given on the command
line override file values. Configuration problems exit with status 2 and a
message naming the key; runtime failures exit with status 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass

from . import checkpoint as ckpt_io
from . import corpus as C
from . import evaluation, planner, training
from .kvcache import CODEC_KINDS, ReusePlan, make_codec, savings_report
from .model import ModelConfig, TransformerModel

log = logging.getLogger("kvcar")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- option tables

# name -> (type, default, help); type "path" is a string, "ints"/"floats" are comma lists
_COMMON = {
    "config": ("path", None, "JSON file with default values for any option"),
    "seed": (int, 0, "random seed"),
    "out": ("path", None, "output path"),
}
_TRAIN = {
    "lr": (float, None, "SGD learning rate"),
    "epochs": (int, None, "passes over the training split"),
    "batch_size": (int, 16, "windows per minibatch"),
    "seq_len": (int, 32, "tokens per window"),
    "max_steps": (int, None, "stop after this many updates"),
    "log_csv": ("path", None, "append per-step losses to this CSV"),
}
_DATA = {"corpus": ("path", None, "byte corpus file (at least 10 KB)")}
_CKPT = {"checkpoint": ("path", None, "input checkpoint")}

COMMANDS = {
    "pretrain": {
        **_DATA,
        **_TRAIN,
        "lr": (float, 0.5, "SGD learning rate"),
        "epochs": (int, 3, "passes over the training split"),
        "n_layers": (int, 2, "transformer layers"),
        "n_heads": (int, 4, "attention heads"),
        "d_model": (int, 32, "model width"),
        "d_ff": (int, 64, "feed-forward width"),
        "max_seq": (int, 64, "maximum context length"),
    },
    "train-ae": {
        **_CKPT,
        **_DATA,
        **_TRAIN,
        "lr": (float, 0.3, "SGD learning rate"),
        "epochs": (int, 2, "passes over the training split"),
        "layers": ("ints", None, "layers that get autoencoders, e.g. 0,1"),
        "latent_dim": (int, None, "latent width d (multiple of n_heads)"),
        "hidden": (int, None, "first autoencoder layer width"),
        "l1_scale": (float, 1.0, "weight of the reconstruction L1 term"),
    },
    "finetune-ae": {
        **_CKPT,
        **_DATA,
        **_TRAIN,
        "lr": (float, 0.3, "SGD learning rate"),
        "epochs": (int, 1, "passes over the training split"),
        "layers": ("ints", None, "subset of the checkpoint's autoencoder layers (default: all)"),
        "l1_scale": (float, 0.1, "weight of the summed reconstruction L1 terms"),
    },
    "analyze-heads": {
        **_CKPT,
        **_DATA,
        "batch_size": (int, 16, "windows per minibatch"),
        "seq_len": (int, 32, "tokens per window"),
        "threshold_percentile": (float, None, "also derive a plan aliasing this % of slots"),
        "threshold": (float, None, "also derive a plan aliasing slots with distance <= this"),
        "plan_out": ("path", None, "where to write the derived plan (JSON)"),
    },
    "finetune-reuse": {
        **_CKPT,
        **_DATA,
        **_TRAIN,
        "lr": (float, 0.1, "SGD learning rate"),
        "epochs": (int, 1, "passes over the training split"),
        "plan": ("path", None, "reuse plan JSON"),
        "stats": ("path", None, "head stats JSON (with --threshold-percentile)"),
        "threshold_percentile": (float, None, "alias this % of slots with the smallest distances"),
        "l1_scale": (float, 0.1, "weight of the reuse L1 term"),
    },
    "eval": {
        **_CKPT,
        **_DATA,
        "scheme": ("str", "identity", "identity | autoencoder | autoencoder_int8"),
        "layers": ("ints", None, "autoencoder layers to enable (default: all in checkpoint)"),
        "plan": ("path", None, "reuse plan JSON (default: the checkpoint's plan, if any)"),
        "seq_len": (int, 32, "tokens per window"),
        "max_windows": (int, 16, "held-out windows to score"),
        "bytes_per_element": (int, 2, "P used for the savings report"),
    },
    "plan": {
        "preset": ("str", None, "gpt2-medium fills model shape, P and weight bytes"),
        "n_layers": (int, None, "transformer layers"),
        "d_model": (int, None, "model width"),
        "n_heads": (int, None, "attention heads"),
        "bytes_per_element": (int, None, "P"),
        "weight_bytes": (int, None, "model parameter footprint"),
        "overhead_bytes": (int, 0, "fixed runtime overhead"),
        "budget_bytes": (int, None, "device memory"),
        "scheme": ("floats", [0.0, 0.25, 0.5, 0.75], "compression fractions, e.g. 0,0.5"),
        "batches": ("ints", [1, 2, 4, 8, 16, 32, 64], "batch sizes"),
        "report_seq": (int, 2048, "sequence length for the header KV figure"),
        "report_batch": (int, 8, "batch size for the header KV figure"),
    },
    "report-savings": {
        "n_layers": (int, 12, "transformer layers"),
        "n_heads": (int, 12, "attention heads"),
        "d_model": (int, 768, "model width"),
        "layers": ("ints", [], "layers with autoencoders"),
        "latent_dim": (int, None, "latent width d (default d_model/2)"),
        "plan": ("path", None, "reuse plan JSON"),
        "reuse_k": (int, 0, "alias this many key slots (first eligible, layer-major)"),
        "reuse_v": (int, 0, "alias this many value slots"),
        "quantize": ("bool", False, "stack int8 on the autoencoder layers"),
        "bytes_per_element": (int, 2, "P"),
    },
}


def _convert(key: str, kind, value):
    try:
        if value is None:
            return None
        if kind in ("path", "str"):
            if not isinstance(value, str):
                raise TypeError
            return value
        if kind == "bool":
            if isinstance(value, bool):
                return value
            raise TypeError
        if kind in ("ints", "floats"):
            cast = int if kind == "ints" else float
            if isinstance(value, str):
                return [cast(v) for v in value.split(",") if v.strip()]
            if isinstance(value, (list, tuple)):
                return [cast(v) for v in value]
            return [cast(value)]
        if kind is int and (isinstance(value, bool) or (isinstance(value, float) and not value.is_integer())):
            raise TypeError
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {getattr(kind, '__name__', kind)}") from None


@dataclass
class RunConfig:
    command: str
    values: dict

    def __getattr__(self, name):
        try:
            return self.values[name]
        except KeyError:
            raise AttributeError(name) from None

    def require(self, *keys) -> None:
        for k in keys:
            if self.values.get(k) is None:
                raise ConfigError(f"{k}: required (flag --{k.replace('_', '-')})")


def resolve(command: str, flags: dict) -> RunConfig:
    """Merge defaults < config file < explicit flags and type-check every key."""
    table = {**_COMMON, **COMMANDS[command]}
    values = {k: spec[1] for k, spec in table.items()}
    path = flags.get("config")
    if path:
        try:
            with open(path) as f:
                file_values = json.load(f)
        except OSError as exc:
            raise ConfigError(f"config: cannot read {path!r}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: {path!r} is not valid JSON ({exc.msg})") from None
        if not isinstance(file_values, dict):
            raise ConfigError("config: top level must be a JSON object")
        for k, v in file_values.items():
            key = k.replace("-", "_")
            if key not in table or key == "config":
                raise ConfigError(f"{k}: unknown key for '{command}'")
            values[key] = _convert(key, table[key][0], v)
    for k, v in flags.items():
        if v is not None and k in table:
            values[k] = _convert(k, table[k][0], v)
    cfg = RunConfig(command, values)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    v = cfg.values
    positive = ("n_layers", "n_heads", "d_model", "d_ff", "max_seq", "batch_size", "seq_len", "epochs",
                "max_windows", "latent_dim", "hidden", "max_steps", "budget_bytes")
    for k in positive:
        if k in v and v[k] is not None and v[k] < 1:
            raise ConfigError(f"{k}: must be positive, got {v[k]}")
    for k in ("lr",):
        if k in v and v[k] is not None and not v[k] > 0:
            raise ConfigError(f"{k}: must be positive, got {v[k]}")
    for k in ("l1_scale", "weight_bytes", "overhead_bytes", "reuse_k", "reuse_v"):
        if k in v and v[k] is not None and v[k] < 0:
            raise ConfigError(f"{k}: must be non-negative, got {v[k]}")
    if v.get("bytes_per_element") is not None and v["bytes_per_element"] not in (1, 2, 4):
        raise ConfigError(f"bytes_per_element: must be 1, 2 or 4, got {v['bytes_per_element']}")
    if v.get("threshold_percentile") is not None and not 0 <= v["threshold_percentile"] <= 100:
        raise ConfigError("threshold_percentile: must be in [0, 100]")
    if cfg.command == "eval" and v["scheme"] not in CODEC_KINDS:
        raise ConfigError(f"scheme: must be one of {', '.join(CODEC_KINDS)}, got {v['scheme']!r}")
    if cfg.command == "plan":
        if v["preset"] not in (None, "gpt2-medium"):
            raise ConfigError(f"preset: unknown preset {v['preset']!r}")
        if any(not 0 <= s < 1 for s in v["scheme"]):
            raise ConfigError("scheme: compression fractions must be in [0, 1)")
        if not v["batches"] or any(b < 1 for b in v["batches"]):
            raise ConfigError("batches: need one or more positive batch sizes")
    if v.get("layers") and any(l < 0 for l in v["layers"]):
        raise ConfigError("layers: layer indices must be non-negative")


# ---------------------------------------------------------------- helpers


def _train_cfg(rc: RunConfig, l1_scale=None, layers=()) -> training.TrainConfig:
    return training.TrainConfig(
        lr=rc.lr,
        batch_size=rc.batch_size,
        epochs=rc.epochs,
        l1_scale=l1_scale if l1_scale is not None else rc.values.get("l1_scale", 0.0),
        selected_layers=tuple(layers),
        seed=rc.seed,
        seq_len=rc.seq_len,
        max_steps=rc.max_steps,
    )


def _corpus(rc: RunConfig) -> C.Corpus:
    rc.require("corpus")
    return C.load(rc.corpus, seed=rc.seed)


def _checkpoint(rc: RunConfig) -> ckpt_io.Checkpoint:
    rc.require("checkpoint")
    return ckpt_io.load(rc.checkpoint)


def _check_seq(rc: RunConfig, model: TransformerModel) -> None:
    if rc.seq_len > model.cfg.max_seq:
        raise ConfigError(f"seq_len: {rc.seq_len} exceeds the model's max_seq {model.cfg.max_seq}")


def _write_log(rc: RunConfig, history: training.TrainLog) -> None:
    if rc.values.get("log_csv"):
        history.write_csv(rc.log_csv)


def _table(rows: list[tuple], header: tuple) -> str:
    cols = [header] + [tuple(str(c) for c in r) for r in rows]
    widths = [max(len(r[i]) for r in cols) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in cols]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _savings_line(model: TransformerModel, codecs, plan, P: int) -> str:
    cfg = model.cfg
    latents = {l: c.latent_dim for l, c in codecs.items() if c.compressed}
    quant = [l for l, c in codecs.items() if c.quantized]
    rep = savings_report(cfg.n_layers, cfg.n_heads, cfg.d_model, latents, plan, quant, P)
    return f"kv savings: {100 * rep['combined'].savings_fraction:.2f}%"


# ---------------------------------------------------------------- commands


def cmd_pretrain(rc: RunConfig) -> int:
    rc.require("out")
    corp = _corpus(rc)
    mcfg = ModelConfig(n_layers=rc.n_layers, n_heads=rc.n_heads, d_model=rc.d_model, d_ff=rc.d_ff,
                       max_seq=rc.max_seq)
    model = TransformerModel(mcfg, seed=rc.seed)
    _check_seq(rc, model)
    history = training.pretrain(model, corp.train, _train_cfg(rc, 0.0))
    _write_log(rc, history)
    ppl = evaluation.perplexity(model, corp.heldout, rc.seq_len, cached=False, max_windows=64)
    ckpt_io.save(rc.out, ckpt_io.Checkpoint(model, meta={"stage": "pretrain", "heldout_ppl": ppl}))
    print(_table([(len(history.rows), f"{history.rows[0]['ce']:.4f}", f"{history.rows[-1]['ce']:.4f}", f"{ppl:.4f}")],
                 ("steps", "ce_first", "ce_last", "heldout_ppl")))
    return 0


def cmd_train_ae(rc: RunConfig) -> int:
    rc.require("out", "layers", "latent_dim")
    ck = _checkpoint(rc)
    corp = _corpus(rc)
    model = ck.model
    _check_seq(rc, model)
    tcfg = _train_cfg(rc, layers=rc.layers)
    tcfg.check_layers(model.cfg.n_layers)
    D, h = model.cfg.d_model, model.cfg.n_heads
    if rc.latent_dim > D or rc.latent_dim % h:
        raise ConfigError(f"latent_dim: must be a multiple of n_heads={h} and at most d_model={D}")
    rows, codecs = [], dict(ck.codecs)
    history = training.TrainLog()
    for layer in rc.layers:
        codec = make_codec(layer, model.cfg.d_model, model.cfg.n_heads, rc.latent_dim, ck.plan,
                           hidden=rc.hidden, rng=rc.seed + layer)
        res = training.train_ae_stage1(model, layer, corp.train, tcfg, codec=codec, plan=ck.plan,
                                       eval_tokens=corp.heldout)
        codecs[layer] = res.codec
        history.rows.extend(res.history.rows)
        rows.append((layer, f"{res.recon_init:.4f}", f"{res.recon_final:.4f}", f"{res.ce_baseline:.4f}",
                     f"{res.ce_final:.4f}"))
    _write_log(rc, history)
    ckpt_io.save(rc.out, ckpt_io.Checkpoint(model, codecs, ck.plan, {**ck.meta, "stage": "stage1"}))
    print(_table(rows, ("layer", "recon_init", "recon_final", "ce_baseline", "ce_with_ae")))
    print(_savings_line(model, codecs, ck.plan, 2))
    return 0


def cmd_finetune_ae(rc: RunConfig) -> int:
    rc.require("out")
    ck = _checkpoint(rc)
    corp = _corpus(rc)
    _check_seq(rc, ck.model)
    layers = rc.layers if rc.layers is not None else sorted(ck.codecs)
    missing = [l for l in layers if l not in ck.codecs]
    if missing:
        raise ConfigError(f"layers: no stage-1 autoencoders in the checkpoint for layers {missing}")
    res = training.train_ae_stage2(ck.model, ck.codecs, corp.train, _train_cfg(rc, layers=layers), plan=ck.plan,
                                   eval_tokens=corp.heldout)
    _write_log(rc, res.history)
    ckpt_io.save(rc.out, ckpt_io.Checkpoint(ck.model, res.codecs, ck.plan, {**ck.meta, "stage": "stage2"}))
    print(_table([("start", f"{res.start_loss:.4f}", f"{res.start_ppl:.4f}"),
                  ("end", f"{res.end_loss:.4f}", f"{res.end_ppl:.4f}")], ("when", "loss", "ppl")))
    print(_savings_line(ck.model, res.codecs, ck.plan, 2))
    return 0


def cmd_analyze_heads(rc: RunConfig) -> int:
    ck = _checkpoint(rc)
    corp = _corpus(rc)
    _check_seq(rc, ck.model)
    stats = training.collect_head_stats(ck.model, corp.train, rc.seq_len, rc.batch_size)
    rows = [(n, h, kv.upper(), f"{d:.6f}") for d, n, h, kv in sorted(stats.slots(), key=lambda s: s[1:])]
    print(_table(rows, ("layer", "head", "kind", "mean_l1")))
    if rc.out:
        with open(rc.out, "w") as f:
            json.dump(stats.to_dict(), f, indent=1)
    plan = None
    if rc.threshold_percentile is not None:
        plan = training.plan_from_percentile(stats, rc.threshold_percentile)
    elif rc.threshold is not None:
        plan = training.build_reuse_plan(stats, rc.threshold)
    if plan is not None:
        cfg = ck.model.cfg
        rep = savings_report(cfg.n_layers, cfg.n_heads, cfg.d_model, None, plan)
        print(f"plan aliases {len(plan)} slots; kv savings {100 * rep['reuse_only'].savings_fraction:.2f}%")
        if rc.plan_out:
            with open(rc.plan_out, "w") as f:
                json.dump(plan.to_dict(), f, indent=1)
    return 0


def _load_plan(path) -> ReusePlan:
    try:
        with open(path) as f:
            return ReusePlan.from_dict(json.load(f))
    except OSError as exc:
        raise ConfigError(f"plan: cannot read {path!r}: {exc.strerror}") from None
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"plan: {path!r} is not a reuse plan ({exc})") from None


def cmd_finetune_reuse(rc: RunConfig) -> int:
    rc.require("out")
    ck = _checkpoint(rc)
    corp = _corpus(rc)
    _check_seq(rc, ck.model)
    if rc.plan:
        plan = _load_plan(rc.plan)
    elif rc.stats and rc.threshold_percentile is not None:
        with open(rc.stats) as f:
            stats = training.HeadStats.from_dict(json.load(f))
        plan = training.plan_from_percentile(stats, rc.threshold_percentile)
    else:
        raise ConfigError("plan: give --plan, or --stats with --threshold-percentile")
    cfg = ck.model.cfg
    if (plan.n_layers, plan.n_heads) != (cfg.n_layers, cfg.n_heads):
        raise ConfigError("plan: built for a different model shape")
    res = training.finetune_reuse(ck.model, plan, corp.train, _train_cfg(rc), eval_tokens=corp.heldout)
    _write_log(rc, res.history)
    ckpt_io.save(rc.out, ckpt_io.Checkpoint(ck.model, ck.codecs, plan, {**ck.meta, "stage": "reuse"}))
    rep = savings_report(cfg.n_layers, cfg.n_heads, cfg.d_model, None, plan)
    print(_table([("no reuse", f"{res.baseline_ce:.6f}"), ("start", f"{res.start_ce:.6f}"),
                  ("end", f"{res.end_ce:.6f}")], ("when", "ce")))
    print(f"plan aliases {len(plan)} slots; kv savings {100 * rep['reuse_only'].savings_fraction:.2f}%")
    return 0


def cmd_eval(rc: RunConfig) -> int:
    ck = _checkpoint(rc)
    corp = _corpus(rc)
    model = ck.model
    _check_seq(rc, model)
    codecs = {}
    if rc.scheme != "identity":
        layers = rc.layers if rc.layers is not None else sorted(ck.codecs)
        if not layers:
            raise ConfigError(f"scheme: '{rc.scheme}' needs autoencoders, but the checkpoint has none")
        missing = [l for l in layers if l not in ck.codecs]
        if missing:
            raise ConfigError(f"layers: checkpoint has no autoencoders for layers {missing}")
        codecs = {l: ck.codecs[l].with_kind(rc.scheme) for l in layers}
    plan = _load_plan(rc.plan) if rc.plan else ck.plan
    base = evaluation.perplexity(model, corp.heldout, rc.seq_len, cached=False, max_windows=rc.max_windows)
    ppl = evaluation.perplexity(model, corp.heldout, rc.seq_len, codecs, plan, cached=True,
                                max_windows=rc.max_windows)
    cfg = model.cfg
    latents = {l: c.latent_dim for l, c in codecs.items()}
    quant = [l for l, c in codecs.items() if c.quantized]
    rep = savings_report(cfg.n_layers, cfg.n_heads, cfg.d_model, latents, plan, quant, rc.bytes_per_element)
    report = {
        "scheme": rc.scheme,
        "codec_layers": sorted(codecs),
        "aliased_slots": len(plan) if plan is not None else 0,
        "perplexity": ppl,
        "baseline_perplexity": base,
        "savings_fraction": rep["combined"].savings_fraction,
    }
    print(_table([(rc.scheme, f"{base:.4f}", f"{ppl:.4f}", f"{100 * report['savings_fraction']:.2f}%")],
                 ("scheme", "baseline_ppl", "ppl", "kv_savings")))
    if rc.out:
        with open(rc.out, "w") as f:
            json.dump(report, f, indent=1)
    return 0


def cmd_plan(rc: RunConfig) -> int:
    v = dict(rc.values)
    if v["preset"] == "gpt2-medium":
        p = planner.GPT2_MEDIUM
        for k, src in (("n_layers", "n_layers"), ("d_model", "d_model"), ("n_heads", "n_heads"),
                       ("bytes_per_element", "P"), ("weight_bytes", "weight_bytes")):
            if v[k] is None:
                v[k] = p[src]
    rc = RunConfig(rc.command, v)
    rc.require("n_layers", "d_model", "n_heads", "bytes_per_element", "budget_bytes")
    q = planner.MemoryQuery(rc.n_layers, rc.d_model, rc.n_heads, rc.bytes_per_element, rc.budget_bytes,
                            rc.weight_bytes or 0, rc.overhead_bytes)
    if q.budget_bytes < q.fixed_bytes:
        raise ConfigError(f"budget_bytes: {q.budget_bytes} is below weights + overhead ({q.fixed_bytes})")
    try:
        schemes = [planner.Scheme.uniform(c, q.n_layers, q.n_heads, q.d_model,
                                          name="identity" if c == 0 else f"{c:g}") for c in rc.scheme]
    except ValueError as exc:
        raise ConfigError(f"scheme: {exc}") from None
    fr = planner.frontier(q, rc.batches, schemes)
    kv = planner.kv_bytes(q, rc.report_seq, rc.report_batch)
    print(f"# kv cache at seq_len={rc.report_seq} batch={rc.report_batch}: {kv} bytes ({kv / 1e9:.2f} GB)")
    text = fr.to_csv()
    if rc.out:
        fr.write_csv(rc.out)
    print(text, end="")
    return 0


def _first_slots(n_layers, n_heads, kind, count):
    slots = [(l, h, kind) for l in range(1, n_layers) for h in range(n_heads)]
    if count > len(slots):
        raise ConfigError(f"reuse_{kind}: only {len(slots)} {kind.upper()} slots can be aliased")
    return slots[:count]


def cmd_report_savings(rc: RunConfig) -> int:
    L, h, D = rc.n_layers, rc.n_heads, rc.d_model
    latent = rc.latent_dim if rc.latent_dim is not None else D // 2
    if rc.plan:
        plan = _load_plan(rc.plan)
    else:
        plan = ReusePlan(L, h, frozenset(_first_slots(L, h, "k", rc.reuse_k) + _first_slots(L, h, "v", rc.reuse_v)))
    bad = [l for l in rc.layers if l >= L]
    if bad:
        raise ConfigError(f"layers: {bad} outside [0, {L})")
    latents = {l: latent for l in rc.layers}
    try:
        rep = savings_report(L, h, D, latents, plan, rc.layers if rc.quantize else (), rc.bytes_per_element)
    except ValueError as exc:
        raise ConfigError(f"latent_dim: {exc}") from None
    rows = [(name, s.total_bytes, s.baseline_bytes, f"{100 * s.savings_fraction:.4f}%") for name, s in rep.items()]
    print(f"# L={L} h={h} D={D} d={latent} ae_layers={len(rc.layers)} aliased_slots={len(plan)} "
          f"(per token, P={rc.bytes_per_element})")
    print(_table(rows, ("plan", "bytes", "baseline", "savings")))
    return 0


HANDLERS = {
    "pretrain": cmd_pretrain,
    "train-ae": cmd_train_ae,
    "finetune-ae": cmd_finetune_ae,
    "analyze-heads": cmd_analyze_heads,
    "finetune-reuse": cmd_finetune_reuse,
    "eval": cmd_eval,
    "plan": cmd_plan,
    "report-savings": cmd_report_savings,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kvcar", description="KV-cache compression toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, table in COMMANDS.items():
        sp = sub.add_parser(name)
        for key, (kind, default, help_) in {**_COMMON, **table}.items():
            flag = "--" + key.replace("_", "-")
            if kind == "bool":
                sp.add_argument(flag, dest=key, action="store_const", const=True, default=None, help=help_)
            else:
                sp.add_argument(flag, dest=key, default=None, help=f"{help_} (default: {default})")
    return parser


def _setup_logging() -> None:
    level = os.environ.get("KVCAR_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise ConfigError(f"KVCAR_LOG: must be error, info or debug, got {level!r}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    flags = {k: v for k, v in vars(args).items() if k != "command"}
    try:
        _setup_logging()
        rc = resolve(args.command, flags)
        return HANDLERS[args.command](rc)
    except ConfigError as exc:
        print(f"kvcar {args.command}: invalid config: {exc}", file=sys.stderr)
        return 2
    except (C.CorpusError, ckpt_io.CheckpointError) as exc:
        print(f"kvcar {args.command}: {exc}", file=sys.stderr)
        return 2
    except (training.TrainingDiverged, ValueError, KeyError, OSError) as exc:
        print(f"kvcar {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
