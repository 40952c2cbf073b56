"""Checkpoint container: JSON manifest plus raw little-endian tensor bytes.

Layout::

    b"KVCR" | u16 version | u32 manifest_len | manifest (UTF-8 JSON) | tensor data

The manifest records the model config, autoencoder configs per layer, an
optional reuse plan, free-form metadata and, for every tensor, its name,
dtype, shape and byte offset into the data section. Tensor names:

    model/<param>                    e.g. model/layers.0.attn.w_k
    ae/<layer>/<k|v>/<param>         e.g. ae/1/k/enc.fc1.weight, ae/1/k/enc.bn.running_mean
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .autoencoder import Autoencoder, AutoencoderConfig
from .kvcache import KINDS, CodecSpec, ReusePlan
from .model import ModelConfig, TransformerModel

MAGIC = b"KVCR"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: TransformerModel
    codecs: dict[int, CodecSpec] = field(default_factory=dict)
    plan: ReusePlan | None = None
    meta: dict = field(default_factory=dict)


def _ae_cfg_dict(ae: Autoencoder | None):
    if ae is None:
        return None
    c = ae.cfg
    return {"d_in": c.d_in, "latent": c.latent, "hidden": c.hidden, "leaky_slope": c.leaky_slope}


def save(path, ckpt: Checkpoint) -> None:
    arrays: dict[str, np.ndarray] = {f"model/{k}": v for k, v in ckpt.model.state_dict().items()}
    aes = {}
    for layer, codec in sorted(ckpt.codecs.items()):
        aes[str(layer)] = {
            "kind": codec.kind,
            "latent_dim": codec.latent_dim,
            **{kv: _ae_cfg_dict(codec.autoencoder(kv)) for kv in KINDS},
        }
        for kv in KINDS:
            ae = codec.autoencoder(kv)
            if ae is not None:
                for name, arr in ae.state_dict().items():
                    arrays[f"ae/{layer}/{kv}/{name}"] = arr
    entries, offset, blobs = [], 0, []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        dt = arr.dtype.newbyteorder("<")
        blob = arr.astype(dt).tobytes()
        entries.append({"name": name, "dtype": dt.str, "shape": list(arr.shape), "offset": offset})
        offset += len(blob)
        blobs.append(blob)
    manifest = {
        "format": "kvcar-checkpoint",
        "version": VERSION,
        "model_config": ckpt.model.cfg.to_dict(),
        "autoencoders": aes,
        "plan": ckpt.plan.to_dict() if ckpt.plan is not None else None,
        "meta": ckpt.meta,
        "tensors": entries,
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC + struct.pack("<HI", VERSION, len(head)) + head)
        for b in blobs:
            f.write(b)
    os.replace(tmp, path)


def load(path) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {os.fspath(path)!r}: {exc.strerror}") from exc
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{os.fspath(path)!r} is not a kvcar checkpoint")
    version, hlen = struct.unpack_from("<HI", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    manifest = json.loads(raw[10 : 10 + hlen])
    base = 10 + hlen
    arrays = {}
    for e in manifest["tensors"]:
        dt = np.dtype(e["dtype"])
        n = int(np.prod(e["shape"], dtype=np.int64))
        arrays[e["name"]] = np.frombuffer(raw, dtype=dt, count=n, offset=base + e["offset"]).reshape(e["shape"]).copy()

    model = TransformerModel(ModelConfig(**manifest["model_config"]))
    model.load_state_dict({k[len("model/"):]: v for k, v in arrays.items() if k.startswith("model/")})
    codecs = {}
    for layer, spec in manifest["autoencoders"].items():
        aes = {}
        for kv in KINDS:
            if spec[kv] is None:
                aes[kv] = None
                continue
            prefix = f"ae/{layer}/{kv}/"
            state = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
            aes[kv] = Autoencoder.from_state(AutoencoderConfig(**spec[kv]), state)
        codecs[int(layer)] = CodecSpec(spec["kind"], spec["latent_dim"], aes["k"], aes["v"])
    plan = ReusePlan.from_dict(manifest["plan"]) if manifest["plan"] else None
    return Checkpoint(model, codecs, plan, manifest["meta"])
