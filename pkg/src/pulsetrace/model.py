"""Encoder -> C-GRU -> head diameter regressor."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .cgru import CGru, StreamingCGru
from .encoder import Encoder, EncoderConfig, ci_config, full_config
from .head import Head, HeadConfig, ci_head_config, full_head_config
from .tensor import Param, ShapeError


@dataclass(frozen=True)
class Profile:
    name: str
    encoder: EncoderConfig
    head: HeadConfig
    frame_size: int
    pixel_pitch: float


def get_profile(name: str) -> Profile:
    if name == "full":
        enc = full_config()
        return Profile("full", enc, full_head_config(enc.feature_size), 128, 0.0625)
    if name == "test":
        enc = ci_config()
        return Profile("test", enc, ci_head_config(enc.feature_size), 64, 0.125)
    raise ValueError(f"unknown profile {name!r} (expected 'full' or 'test')")


PROFILES = ("full", "test")


class DiameterNet:
    """Per-frame encoder, optional convolutional GRU, FC head.

    With ``recurrent=False`` the encoder output feeds the head directly, which
    gives the frame-wise baseline.
    """

    def __init__(self, profile: str | Profile = "test", recurrent: bool = True, seed: int = 0,
                 dtype=T.DEFAULT_DTYPE):
        self.profile = get_profile(profile) if isinstance(profile, str) else profile
        self.recurrent = recurrent
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(self.profile.encoder, rng, dtype)
        d = self.profile.encoder.output_shape[0]
        self.cgru = CGru(d, rng, dtype) if recurrent else None
        self.head = Head(self.profile.head, rng, dtype)
        if self.head.config.input_size != self.profile.encoder.feature_size:
            raise ShapeError("head input width does not match the encoder output")

    @property
    def variant(self) -> str:
        return "cgru" if self.recurrent else "framewise"

    @property
    def params(self) -> dict[str, Param]:
        out = {f"encoder.{k}": p for k, p in self.encoder.params.items()}
        if self.cgru is not None:
            out.update({f"cgru.{k}": p for k, p in self.cgru.params.items()})
        out.update({f"head.{k}": p for k, p in self.head.params.items()})
        return out

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def forward_sequence(self, frames: np.ndarray, train: bool = False) -> np.ndarray:
        """``K x 1 x N x M`` (or ``K x N x M``) frames -> length-``K`` diameters."""
        if frames.ndim == 3:
            frames = frames[:, None]
        frames = frames.astype(self.dtype, copy=False)
        feats = self.encoder.forward(frames, train=train)
        states = self.cgru.unroll(feats, train=train) if self.cgru is not None else feats
        return self.head.forward(states, train=train)

    def backward(self, grad_y_hat: np.ndarray) -> None:
        g = self.head.backward(np.asarray(grad_y_hat, dtype=self.dtype))
        if self.cgru is not None:
            g = self.cgru.bptt(g)
        self.encoder.backward(g)

    def streamer(self) -> "StreamingPredictor":
        return StreamingPredictor(self)


class StreamingPredictor:
    """Causal frame-by-frame inference with frozen weights.

    Each ``push`` returns the diameter for that frame before the next one is
    seen. ``timings`` accumulates per-stage seconds when ``timed`` is set.
    """

    STAGES = ("encode", "step", "predict")

    def __init__(self, net: DiameterNet, timed: bool = False):
        self.net = net
        _, h, w = net.profile.encoder.output_shape
        self._cell = StreamingCGru(net.cgru, (h, w)) if net.cgru is not None else None
        self.timed = timed
        self.timings: dict[str, list[float]] = {s: [] for s in self.STAGES}

    def reset(self) -> None:
        if self._cell is not None:
            self._cell.reset()
        self.timings = {s: [] for s in self.STAGES}

    def push(self, frame: np.ndarray) -> float:
        frame = np.asarray(frame, dtype=self.net.dtype)
        if frame.ndim == 2:
            frame = frame[None]
        if not self.timed:
            x = self.net.encoder.forward(frame)
            h = self._cell.push(x) if self._cell is not None else x
            return float(self.net.head.forward(h))
        t0 = time.perf_counter()
        x = self.net.encoder.forward(frame)
        t1 = time.perf_counter()
        h = self._cell.push(x) if self._cell is not None else x
        t2 = time.perf_counter()
        y = float(self.net.head.forward(h))
        t3 = time.perf_counter()
        self.timings["encode"].append(t1 - t0)
        self.timings["step"].append(t2 - t1)
        self.timings["predict"].append(t3 - t2)
        return y
