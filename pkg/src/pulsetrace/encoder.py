"""Shallow AlexNet-style frame encoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ConvSpec, Param, ShapeError


@dataclass(frozen=True)
class LayerSpec:
    conv: ConvSpec
    activation: str = "relu"
    pool: tuple[int, int] | None = None  # (window, stride)


@dataclass(frozen=True)
class EncoderConfig:
    input_size: int
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        # validates the chain; raises on degenerate extents
        self.output_shape

    @property
    def output_shape(self) -> tuple[int, int, int]:
        h = w = self.input_size
        channels = 1
        for layer in self.layers:
            if layer.conv.in_channels != channels:
                raise ShapeError(
                    f"layer expects {layer.conv.in_channels} input channels, previous layer gives {channels}"
                )
            h, w = layer.conv.output_hw(h, w)
            if layer.pool is not None:
                h, w = T.pool_output_hw(h, w, *layer.pool)
            channels = layer.conv.out_channels
        return channels, h, w

    @property
    def feature_size(self) -> int:
        d, h, w = self.output_shape
        return d * h * w


def full_config() -> EncoderConfig:
    """128x128 grayscale -> 256x13x13."""
    return EncoderConfig(
        input_size=128,
        layers=(
            LayerSpec(ConvSpec(1, 64, (11, 11), (4, 4), (5, 5)), pool=(3, 2)),
            LayerSpec(ConvSpec(64, 192, (5, 5), (1, 1), (2, 2))),
            LayerSpec(ConvSpec(192, 384, (3, 3), (1, 1), (1, 1))),
            LayerSpec(ConvSpec(384, 256, (3, 3), (1, 1), (1, 1))),
            LayerSpec(ConvSpec(256, 256, (3, 3), (1, 1), (0, 0))),
        ),
    )


def ci_config() -> EncoderConfig:
    """64x64 grayscale -> 32x6x6, light enough for per-commit training runs."""
    return EncoderConfig(
        input_size=64,
        layers=(
            LayerSpec(ConvSpec(1, 16, (5, 5), (2, 2), (2, 2)), pool=(2, 2)),
            LayerSpec(ConvSpec(16, 32, (3, 3), (1, 1), (1, 1)), pool=(2, 2)),
            LayerSpec(ConvSpec(32, 32, (3, 3), (1, 1), (0, 0))),
        ),
    )


def toy_config() -> EncoderConfig:
    """16x16 -> 4x3x3; used by gradient checks."""
    return EncoderConfig(
        input_size=16,
        layers=(
            LayerSpec(ConvSpec(1, 3, (3, 3), (1, 1), (1, 1)), pool=(2, 2)),
            LayerSpec(ConvSpec(3, 4, (3, 3), (2, 2), (0, 0))),
        ),
    )


class Encoder:
    """Per-frame feature extractor.

    ``forward`` accepts one ``1 x N x M`` frame or a stack ``K x 1 x N x M``;
    frames never interact, so a stack is just a faster way to encode a sequence.
    """

    def __init__(self, config: EncoderConfig, rng: np.random.Generator | None = None, dtype=T.DEFAULT_DTYPE):
        self.config = config
        rng = np.random.default_rng(0) if rng is None else rng
        self.params: dict[str, Param] = {}
        for i, layer in enumerate(config.layers, start=1):
            c = layer.conv
            fan_in = c.in_channels * c.kernel[0] * c.kernel[1]
            self.params[f"conv{i}.weight"] = Param(T.kaiming_uniform(c.weight_shape, fan_in, rng, dtype))
            self.params[f"conv{i}.bias"] = Param(np.zeros(c.out_channels, dtype=dtype))
        self._caches: list | None = None

    def forward(self, frames: np.ndarray, train: bool = False) -> np.ndarray:
        n = self.config.input_size
        if frames.shape[-3:] != (1, n, n):
            raise ShapeError(f"encoder expects frames of shape (1, {n}, {n}), got {frames.shape}")
        caches = []
        x = frames
        for i, layer in enumerate(self.config.layers, start=1):
            x, conv_cache = T.conv2d_forward(x, self.params[f"conv{i}.weight"], self.params[f"conv{i}.bias"], layer.conv)
            if layer.activation == "relu":
                np.maximum(x, 0, out=x)
            else:
                x = T.activation(x, layer.activation)
            act_out = x
            pool_cache = None
            if layer.pool is not None:
                if train:
                    x, pool_cache = T.max_pool2d_forward(x, *layer.pool)
                else:
                    x = T.max_pool2d(x, *layer.pool)
            if train:
                caches.append((conv_cache, act_out, pool_cache))
        self._caches = caches if train else None
        return x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        if self._caches is None:
            raise RuntimeError("encoder backward called without a retained training forward pass")
        for layer, (conv_cache, act_out, pool_cache) in zip(reversed(self.config.layers), reversed(self._caches)):
            if pool_cache is not None:
                grad = T.max_pool2d_backward(grad, pool_cache)
            grad = T.activation_backward(grad, act_out, layer.activation)
            grad = T.conv2d_backward(grad, conv_cache)
        return grad


def encode_frame(frame: np.ndarray, encoder: Encoder) -> np.ndarray:
    return encoder.forward(frame)
