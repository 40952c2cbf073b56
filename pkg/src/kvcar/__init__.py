"""KV-cache compression for decoder-only transformers.

Per-layer autoencoders shrink cached K/V rows from ``d_model`` to a latent
width, cross-layer head reuse lets a layer read selected heads from the layer
below instead of storing them, and int8 storage can be stacked on top. The
analytic planner turns the resulting byte counts into context-length and
batch-size frontiers.
"""

from .autoencoder import Autoencoder, AutoencoderConfig
from .kvcache import (CacheLayout, CodecSpec, KVCache, ReusePlan, bytes_used, dense_kv_bytes, make_codec,
                      savings_report)
from .model import ModelConfig, TransformerModel
from .planner import MemoryQuery, Scheme, frontier, max_seq
from .quantizer import dequantize, quantize
from .training import TrainConfig

__version__ = "0.1.0"

__all__ = [
    "Autoencoder",
    "AutoencoderConfig",
    "CacheLayout",
    "CodecSpec",
    "KVCache",
    "MemoryQuery",
    "ModelConfig",
    "ReusePlan",
    "Scheme",
    "TrainConfig",
    "TransformerModel",
    "bytes_used",
    "dense_kv_bytes",
    "dequantize",
    "frontier",
    "make_codec",
    "max_seq",
    "quantize",
    "savings_report",
]
