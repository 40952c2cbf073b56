"""Asymmetric int8 quantization of one real vector.

scale     = 255 / (max(x) - min(x))
zeropoint = -round(scale * min(x)) - 128
q         = clamp(round(scale * x + zeropoint), -128, 127)
x'        = (q - zeropoint) / scale

``round`` is half-away-from-zero. Without the clamp the max element can land
on 128.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

QMIN, QMAX = -128, 127
HEADER_BYTES = 6  # float32 scale + int16 zeropoint
_ZP_LIMIT = 32000  # keeps |zeropoint| inside int16 with room for rounding


class DegenerateRangeError(ValueError):
    """max(x) == min(x): the scale is undefined."""


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class QuantizedBlock:
    q: np.ndarray  # int8
    scale: float
    zeropoint: int

    @property
    def nbytes(self) -> int:
        return self.q.size + HEADER_BYTES


def quantize(x) -> QuantizedBlock:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    lo, hi = float(x.min()), float(x.max())
    if not hi > lo:
        raise DegenerateRangeError(f"constant input ({lo}); quantization range is empty")
    with np.errstate(over="ignore"):
        scale = 255.0 / (hi - lo)
    if not np.isfinite(scale):
        raise DegenerateRangeError(f"range {hi - lo} is too small for a finite scale")
    zp = int(-round_half_away(scale * lo) - 128)
    q = np.clip(round_half_away(scale * x + zp), QMIN, QMAX).astype(np.int8)
    return QuantizedBlock(q, scale, zp)


def dequantize(block: QuantizedBlock) -> np.ndarray:
    if block.scale == 0:
        raise ZeroDivisionError("quantized block has zero scale")
    return (block.q.astype(np.float64) - block.zeropoint) / block.scale


def quantize_rows(rows: np.ndarray):
    """Row-wise quantization for cache storage.

    Returns ``(q[n, w] int8, scale[n] float32, zeropoint[n] int16)``. A row
    whose range is too narrow for its magnitude (constant rows included) has
    no usable scale or a zeropoint outside int16, so its range is stretched
    to include zero; a row that is zero to float32 precision uses [-1, 1].
    """
    rows = np.asarray(rows, dtype=np.float64)
    lo = rows.min(axis=1)
    hi = rows.max(axis=1)
    mag = np.maximum(np.abs(lo), np.abs(hi))
    narrow = ~(255.0 * mag <= _ZP_LIMIT * (hi - lo))
    lo = np.where(narrow, np.minimum(lo, 0.0), lo)
    hi = np.where(narrow, np.maximum(hi, 0.0), hi)
    # below this width the scale would overflow its float32 header field
    tiny = (hi - lo) * np.finfo(np.float32).max < 256.0
    lo = np.where(tiny, -1.0, lo)
    hi = np.where(tiny, 1.0, hi)
    # codes are computed with the scale exactly as stored
    scale = (255.0 / (hi - lo)).astype(np.float32)
    s = scale.astype(np.float64)
    zp = -round_half_away(s * lo) - 128
    q = np.clip(round_half_away(s[:, None] * rows + zp[:, None]), QMIN, QMAX)
    return q.astype(np.int8), scale, zp.astype(np.int16)


def dequantize_rows(q: np.ndarray, scale: np.ndarray, zp: np.ndarray) -> np.ndarray:
    return (q.astype(np.float64) - zp[:, None].astype(np.float64)) / scale[:, None].astype(np.float64)
