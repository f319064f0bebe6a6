"""Fully connected regression head: flattened state -> diameter in mm."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Param, ShapeError


@dataclass(frozen=True)
class HeadConfig:
    widths: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        if len(self.widths) < 2 or self.widths[-1] != 1:
            raise ValueError(f"head widths must end in 1, got {self.widths}")

    @property
    def input_size(self) -> int:
        return self.widths[0]


def full_head_config(input_size: int = 256 * 13 * 13) -> HeadConfig:
    return HeadConfig((input_size, 512, 64, 1))


def ci_head_config(input_size: int = 32 * 6 * 6) -> HeadConfig:
    return HeadConfig((input_size, 32, 1))


class Head:
    def __init__(self, config: HeadConfig, rng: np.random.Generator | None = None, dtype=T.DEFAULT_DTYPE):
        self.config = config
        rng = np.random.default_rng(0) if rng is None else rng
        self.params: dict[str, Param] = {}
        for i, (n_in, n_out) in enumerate(zip(config.widths[:-1], config.widths[1:]), start=1):
            self.params[f"fc{i}.weight"] = Param(T.kaiming_uniform((n_out, n_in), n_in, rng, dtype))
            self.params[f"fc{i}.bias"] = Param(np.zeros(n_out, dtype=dtype))
        self.n_layers = len(config.widths) - 1
        self._caches: list | None = None

    @property
    def output_bias(self) -> Param:
        return self.params[f"fc{self.n_layers}.bias"]

    def forward(self, h: np.ndarray, train: bool = False) -> np.ndarray:
        """Map one state (any shape with the right size) or a ``K x ...`` stack to diameters.

        A single state is a vector or a ``D x H x W`` map and yields a 0-d array;
        a stack (``K x n`` or ``K x D x H x W``) yields a length-``K`` vector.
        """
        n = self.config.input_size
        if h.ndim in (1, 3) and h.size == n:
            x = h.reshape(n)
        elif h.ndim in (2, 4) and h[0].size == n:
            x = h.reshape(h.shape[0], n)
        else:
            raise ShapeError(f"head expects {n} features per state, got array of shape {h.shape}")
        in_shape = h.shape
        caches = []
        for i in range(1, self.n_layers + 1):
            x, cache = T.dense_forward(x, self.params[f"fc{i}.weight"], self.params[f"fc{i}.bias"])
            act_out = None
            if i < self.n_layers:
                x = T.activation(x, self.config.activation)
                act_out = x
            caches.append((cache, act_out))
        self._caches = (caches, in_shape) if train else None
        return x[..., 0]

    def backward(self, grad: np.ndarray | float) -> np.ndarray:
        """Gradient w.r.t. the head input, shaped like the forward input."""
        if self._caches is None:
            raise RuntimeError("head backward called without a retained training forward pass")
        caches, in_shape = self._caches
        g = np.asarray(grad, dtype=caches[-1][0].x.dtype)[..., None]
        for cache, act_out in reversed(caches):
            if act_out is not None:
                g = T.activation_backward(g, act_out, self.config.activation)
            g = T.dense_backward(g, cache)
        return g.reshape(in_shape)


def predict(h: np.ndarray, head: Head) -> float:
    return float(head.forward(h))
