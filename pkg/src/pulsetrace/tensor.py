"""Dense tensor primitives with explicit backward passes.

Tensors are plain ``numpy.ndarray`` values. Every differentiable op comes as a
``*_forward`` function returning ``(output, cache)`` and a matching
``*_backward`` that consumes the cache, accumulates parameter gradients into
:class:`Param` objects and returns the gradient with respect to its input.

Spatial ops accept either a single ``C x H x W`` map or a batch
``B x C x H x W``; batching is only used to amortize work across frames that
do not depend on each other.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent."""


class DegenerateOutputError(ShapeError):
    """Raised when a conv/pool configuration produces an empty output."""


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise ShapeError(f"grad shape {self.grad.shape} != value shape {self.value.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int]
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        ho = _out_extent(h, self.kernel[0], self.stride[0], self.padding[0])
        wo = _out_extent(w, self.kernel[1], self.stride[1], self.padding[1])
        if ho < 1 or wo < 1:
            raise DegenerateOutputError(
                f"conv {self.kernel} stride {self.stride} pad {self.padding} on {h}x{w} "
                f"gives empty output {ho}x{wo}"
            )
        return ho, wo

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, *self.kernel)


def _out_extent(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def pool_output_hw(h: int, w: int, window: int, stride: int) -> tuple[int, int]:
    if h < window or w < window:
        raise DegenerateOutputError(f"pool window {window} larger than input {h}x{w}")
    return _out_extent(h, window, stride, 0), _out_extent(w, window, stride, 0)


def kaiming_uniform(shape, fan_in: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected C x H x W or B x C x H x W input, got shape {x.shape}")


# ----------------------------------------------------------------------------
# convolution


def im2col(x: np.ndarray, kernel, stride, padding) -> tuple[np.ndarray, tuple[int, int]]:
    """Unfold a ``B x C x H x W`` batch into a ``(C*kh*kw) x (B*H'*W')`` matrix."""
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    b, c, h, w = x.shape
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if ph or pw:
        xp = np.zeros((b, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
        xp[:, :, ph : ph + h, pw : pw + w] = x
    else:
        xp = x
    cols = np.empty((c, kh, kw, b, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw].transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, b * ho * wo), (ho, wo)


def col2im(cols: np.ndarray, x_shape, kernel, stride, padding, out_hw) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back into a padded batch."""
    b, c, h, w = x_shape
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    ho, wo = out_hw
    cols = cols.reshape(c, kh, kw, b, ho, wo)
    dx = np.zeros((b, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += cols[:, i, j].transpose(1, 0, 2, 3)
    if ph or pw:
        dx = dx[:, :, ph : ph + h, pw : pw + w]
    return dx


@dataclass
class ConvCache:
    x_shape: tuple[int, ...]
    squeeze: bool
    cols: np.ndarray
    out_hw: tuple[int, int]
    weight: Param
    bias: Param
    spec: ConvSpec


def _check_conv(x: np.ndarray, weight: Param, bias: Param, spec: ConvSpec) -> None:
    if weight.shape != spec.weight_shape:
        raise ShapeError(f"weight shape {weight.shape} does not match spec {spec.weight_shape}")
    if bias.shape != (spec.out_channels,):
        raise ShapeError(f"bias shape {bias.shape} does not match out_channels {spec.out_channels}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"input channel axis has {x.shape[1]} channels, spec expects {spec.in_channels}")


def conv2d_forward(x: np.ndarray, weight: Param, bias: Param, spec: ConvSpec) -> tuple[np.ndarray, ConvCache]:
    xb, squeeze = _as_batch(x)
    _check_conv(xb, weight, bias, spec)
    spec.output_hw(xb.shape[2], xb.shape[3])
    cols, (ho, wo) = im2col(xb, spec.kernel, spec.stride, spec.padding)
    out = weight.value.reshape(spec.out_channels, -1) @ cols
    out += bias.value[:, None]
    out = out.reshape(spec.out_channels, xb.shape[0], ho, wo).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)
    cache = ConvCache(xb.shape, squeeze, cols, (ho, wo), weight, bias, spec)
    return (out[0] if squeeze else out), cache


def conv2d(x: np.ndarray, weight: Param, bias: Param, spec: ConvSpec) -> np.ndarray:
    """Zero-padded cross-correlation (no kernel flip)."""
    return conv2d_forward(x, weight, bias, spec)[0]


def conv2d_backward(grad_out: np.ndarray, cache: ConvCache) -> np.ndarray:
    spec = cache.spec
    g = grad_out[None] if cache.squeeze else grad_out
    g2 = g.transpose(1, 0, 2, 3).reshape(spec.out_channels, -1)
    cache.weight.grad += (g2 @ cache.cols.T).reshape(spec.weight_shape)
    cache.bias.grad += g2.sum(axis=1)
    dcols = cache.weight.value.reshape(spec.out_channels, -1).T @ g2
    dx = col2im(dcols, cache.x_shape, spec.kernel, spec.stride, spec.padding, cache.out_hw)
    return dx[0] if cache.squeeze else dx


# ----------------------------------------------------------------------------
# pooling


@dataclass
class PoolCache:
    x_shape: tuple[int, ...]
    squeeze: bool
    argmax: np.ndarray
    window: int
    stride: int


def max_pool2d_forward(x: np.ndarray, window: int, stride: int) -> tuple[np.ndarray, PoolCache]:
    xb, squeeze = _as_batch(x)
    ho, wo = pool_output_hw(xb.shape[2], xb.shape[3], window, stride)
    win = sliding_window_view(xb, (window, window), axis=(2, 3))[
        :, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride
    ]
    flat = win.reshape(*win.shape[:4], window * window)
    # np.argmax returns the first maximal index, i.e. row-major tie breaking
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    cache = PoolCache(xb.shape, squeeze, arg, window, stride)
    return (out[0] if squeeze else out), cache


def max_pool2d(x: np.ndarray, window: int, stride: int) -> np.ndarray:
    """Forward-only pooling; no argmax bookkeeping."""
    h, w = x.shape[-2:]
    ho, wo = pool_output_hw(h, w, window, stride)
    out = None
    for i in range(window):
        for j in range(window):
            v = x[..., i : i + stride * ho : stride, j : j + stride * wo : stride]
            out = v.copy() if out is None else np.maximum(out, v, out=out)
    return out


def max_pool2d_backward(grad_out: np.ndarray, cache: PoolCache) -> np.ndarray:
    g = grad_out[None] if cache.squeeze else grad_out
    k, s = cache.window, cache.stride
    ho, wo = cache.argmax.shape[2:]
    dx = np.zeros(cache.x_shape, dtype=g.dtype)
    for idx in range(k * k):
        i, j = divmod(idx, k)
        dx[:, :, i : i + s * ho : s, j : j + s * wo : s] += np.where(cache.argmax == idx, g, 0)
    return dx[0] if cache.squeeze else dx


# ----------------------------------------------------------------------------
# dense


@dataclass
class DenseCache:
    x: np.ndarray
    weight: Param
    bias: Param


def dense_forward(x: np.ndarray, weight: Param, bias: Param) -> tuple[np.ndarray, DenseCache]:
    """Affine map ``W @ x + b`` for ``x`` of shape ``(n,)`` or ``(B, n)``."""
    m, n = weight.shape
    if x.shape[-1] != n:
        raise ShapeError(f"dense input length {x.shape[-1]} != weight columns {n}")
    if bias.shape != (m,):
        raise ShapeError(f"dense bias shape {bias.shape} != ({m},)")
    out = x @ weight.value.T + bias.value
    return out, DenseCache(x, weight, bias)


def dense(x: np.ndarray, weight: Param, bias: Param) -> np.ndarray:
    return dense_forward(x, weight, bias)[0]


def dense_backward(grad_out: np.ndarray, cache: DenseCache) -> np.ndarray:
    g2 = grad_out.reshape(-1, cache.weight.shape[0])
    x2 = cache.x.reshape(-1, cache.weight.shape[1])
    cache.weight.grad += g2.T @ x2
    cache.bias.grad += g2.sum(axis=0)
    return grad_out @ cache.weight.value


# ----------------------------------------------------------------------------
# activations and elementwise ops

ACTIVATIONS = ("sigmoid", "tanh", "relu")


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "sigmoid":
        return expit(x)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "relu":
        return np.maximum(x, 0)
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(grad_out: np.ndarray, out: np.ndarray, kind: str) -> np.ndarray:
    """Gradient through an activation, given the activation's *output*."""
    if kind == "sigmoid":
        return grad_out * out * (1 - out)
    if kind == "tanh":
        return grad_out * (1 - out * out)
    if kind == "relu":
        return grad_out * (out > 0)
    raise ValueError(f"unknown activation {kind!r}")


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"elementwise operands differ in shape: {a.shape} vs {b.shape}")


def elementwise(a: np.ndarray, b: np.ndarray, kind: str) -> np.ndarray:
    _same_shape(a, b)
    if kind == "add":
        return a + b
    if kind == "mul":
        return a * b
    raise ValueError(f"unknown elementwise op {kind!r}")


def elementwise_backward(grad_out: np.ndarray, a: np.ndarray, b: np.ndarray, kind: str):
    if kind == "add":
        return grad_out, grad_out
    if kind == "mul":
        return grad_out * b, grad_out * a
    raise ValueError(f"unknown elementwise op {kind!r}")


def blend(gate: np.ndarray, old: np.ndarray, new: np.ndarray) -> np.ndarray:
    """Gated convex blend ``(1 - gate) * old + gate * new``."""
    _same_shape(gate, old)
    _same_shape(gate, new)
    return old + gate * (new - old)


def blend_backward(grad_out, gate, old, new):
    """Returns gradients for ``(gate, old, new)``."""
    return grad_out * (new - old), grad_out * (1 - gate), grad_out * gate


def flatten(x: np.ndarray) -> np.ndarray:
    return x.reshape(-1)


def flatten_backward(grad_out: np.ndarray, shape) -> np.ndarray:
    return grad_out.reshape(shape)


# ----------------------------------------------------------------------------
# serialization: [u32 rank][u64 extents...][f32 payload], little-endian


def write_tensor(fh: BinaryIO, array: np.ndarray) -> None:
    array = np.asarray(array)
    fh.write(struct.pack("<I", array.ndim))
    if array.ndim:
        fh.write(struct.pack(f"<{array.ndim}Q", *array.shape))
    fh.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


class TensorFormatError(ValueError):
    pass


def read_tensor(fh: BinaryIO) -> np.ndarray:
    head = fh.read(4)
    if len(head) != 4:
        raise TensorFormatError("truncated tensor header")
    (rank,) = struct.unpack("<I", head)
    raw = fh.read(8 * rank)
    if len(raw) != 8 * rank:
        raise TensorFormatError("truncated tensor extents")
    shape = struct.unpack(f"<{rank}Q", raw) if rank else ()
    count = int(np.prod(shape)) if rank else 1
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise TensorFormatError(f"tensor payload truncated: expected {4 * count} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
