"""Bias-corrected Adam over named parameters."""
from __future__ import annotations

import numpy as np

from .tensor import Param

DEFAULT_LR = 1e-4


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, key: str):
        super().__init__(f"non-finite gradient in parameter {key!r}; step aborted")
        self.key = key


class Adam:
    def __init__(self, params: dict[str, Param], lr: float = DEFAULT_LR, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        # check everything first so a bad gradient leaves params untouched
        for key, p in self.params.items():
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradientError(key)
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for key, p in self.params.items():
            g = p.grad
            m, v = self.m[key], self.v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
            p.value -= update.astype(p.value.dtype, copy=False)
        self.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for key in self.params:
            out[f"adam.m.{key}"] = self.m[key]
            out[f"adam.v.{key}"] = self.v[key]
        return out

    def load_state(self, t: int, arrays: dict[str, np.ndarray]) -> None:
        self.t = t
        for key, p in self.params.items():
            self.m[key] = arrays[f"adam.m.{key}"].astype(p.value.dtype)
            self.v[key] = arrays[f"adam.v.{key}"].astype(p.value.dtype)


def adam_step(optimizer: Adam) -> None:
    optimizer.step()
