"""Per-layer key/value autoencoder: FC -> BN -> LeakyReLU -> FC, mirrored."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import BatchNormState, Tensor

_BLOCKS = ("enc", "dec")


@dataclass(frozen=True)
class AutoencoderConfig:
    d_in: int
    latent: int
    hidden: int | None = None
    leaky_slope: float = 0.01

    def __post_init__(self):
        if self.d_in < 1 or self.latent < 1:
            raise ValueError("autoencoder widths must be positive")
        # latent == d_in is allowed for identity-capable test rigs
        if self.latent > self.d_in:
            raise ValueError(f"latent width {self.latent} exceeds input width {self.d_in}")
        if self.hidden is None:
            object.__setattr__(self, "hidden", math.ceil((self.d_in + self.latent) / 2))
        if self.hidden < self.latent:
            raise ValueError("hidden width must be at least the latent width")


class Autoencoder:
    def __init__(self, cfg: AutoencoderConfig, rng: np.random.Generator | int | None = None):
        self.cfg = cfg
        rng = np.random.default_rng(rng)
        D, H, d, a = cfg.d_in, cfg.hidden, cfg.latent, cfg.leaky_slope
        self.params: dict[str, Tensor] = {}
        self.bn: dict[str, BatchNormState] = {}
        shapes = {"enc": [(D, H), (H, d)], "dec": [(d, H), (H, D)]}
        for block in _BLOCKS:
            (i1, o1), (i2, o2) = shapes[block]
            # kaiming-uniform: leaky gain before the activation, linear gain after
            b1 = math.sqrt(6.0 / ((1 + a * a) * i1))
            b2 = math.sqrt(3.0 / i2)
            self.params[f"{block}.fc1.weight"] = Tensor(rng.uniform(-b1, b1, (i1, o1)), True)
            self.params[f"{block}.fc1.bias"] = Tensor(np.zeros(o1), True)
            self.params[f"{block}.bn.gamma"] = Tensor(np.ones(o1), True)
            self.params[f"{block}.bn.beta"] = Tensor(np.zeros(o1), True)
            self.params[f"{block}.fc2.weight"] = Tensor(rng.uniform(-b2, b2, (i2, o2)), True)
            self.params[f"{block}.fc2.bias"] = Tensor(np.zeros(o2), True)
            self.bn[block] = BatchNormState(o1)

    @classmethod
    def identity(cls, dim: int, data: np.ndarray | None = None, shift: float | None = None):
        """A latent == input autoencoder that reproduces its input.

        Both linear layers start as the identity; a positive shift keeps the
        activation on its linear side. When ``data`` is given the batchnorm
        affine and running statistics are calibrated on it, so training-mode
        batch statistics on that data also leave it unchanged.
        """
        ae = cls(AutoencoderConfig(dim, dim, hidden=dim))
        eye = np.eye(dim)
        if shift is None:
            shift = 1.0 if data is None else float(np.abs(data).max()) + 1.0
        for block in _BLOCKS:
            bn = ae.bn[block]
            p = ae.params
            p[f"{block}.fc1.weight"].data[...] = eye
            p[f"{block}.fc1.bias"].data[...] = shift
            p[f"{block}.fc2.weight"].data[...] = eye
            p[f"{block}.fc2.bias"].data[...] = -shift
            if data is None:
                bn.running_mean[:] = 0.0
                bn.running_var[:] = 1.0 - bn.eps
            else:
                h = np.asarray(data, dtype=np.float64).reshape(-1, dim) + shift
                mu, var = h.mean(axis=0), h.var(axis=0)
                bn.running_mean[:] = mu
                bn.running_var[:] = var
                p[f"{block}.bn.gamma"].data[...] = np.sqrt(var + bn.eps)
                p[f"{block}.bn.beta"].data[...] = mu
        return ae

    def _half(self, block: str, x: Tensor, training: bool) -> Tensor:
        p = self.params
        h = x @ p[f"{block}.fc1.weight"] + p[f"{block}.fc1.bias"]
        h = T.batchnorm(h, p[f"{block}.bn.gamma"], p[f"{block}.bn.beta"], self.bn[block], training)
        h = T.leaky_relu(h, self.cfg.leaky_slope)
        return h @ p[f"{block}.fc2.weight"] + p[f"{block}.fc2.bias"]

    def encode(self, x, training: bool = False) -> Tensor:
        x = T.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.cfg.d_in:
            raise T.ShapeError(f"encode expects [n, {self.cfg.d_in}], got {x.shape}")
        return self._half("enc", x, training)

    def decode(self, z, training: bool = False) -> Tensor:
        z = T.as_tensor(z)
        if z.ndim != 2 or z.shape[1] != self.cfg.latent:
            raise T.ShapeError(f"decode expects [n, {self.cfg.latent}], got {z.shape}")
        return self._half("dec", z, training)

    def reconstruct(self, x, training: bool = False) -> Tensor:
        return self.decode(self.encode(x, training), training)

    def reconstruction_l1(self, x, training: bool = False) -> Tensor:
        x = T.as_tensor(x)
        return T.l1_loss(self.reconstruct(x, training), x)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: v.data.copy() for k, v in self.params.items()}
        for block, bn in self.bn.items():
            out[f"{block}.bn.running_mean"] = bn.running_mean.copy()
            out[f"{block}.bn.running_var"] = bn.running_var.copy()
        return out

    @classmethod
    def from_state(cls, cfg: AutoencoderConfig, state: dict[str, np.ndarray]) -> "Autoencoder":
        ae = cls(cfg)
        for k, t in ae.params.items():
            if state[k].shape != t.shape:
                raise ValueError(f"{k}: stored shape {state[k].shape} != expected {t.shape}")
            t.data = state[k].astype(t.data.dtype)
        for block, bn in ae.bn.items():
            bn.running_mean = state[f"{block}.bn.running_mean"].astype(np.float64)
            bn.running_var = state[f"{block}.bn.running_var"].astype(np.float64)
        return ae
