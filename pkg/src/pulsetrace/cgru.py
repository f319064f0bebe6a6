"""Convolutional GRU over encoder feature maps, with backpropagation through time.

Gates and state update::

    r = sigmoid(W_hr * h_prev + W_xr * x + b_r)
    z = sigmoid(W_hz * h_prev + W_xz * x + b_z)
    h = (1 - z) . h_prev + z . tanh(W_h * (r . h_prev) + W_x * x + b)

``*`` is a 3x3, stride-1, pad-1 cross-correlation with full D -> D channel
mixing and ``.`` is the elementwise product.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ConvSpec, Param, ShapeError

WEIGHT_KEYS = ("W_hr", "W_xr", "W_hz", "W_xz", "W_h", "W_x")
BIAS_KEYS = ("b_r", "b_z", "b")
KEYS = WEIGHT_KEYS + BIAS_KEYS


@dataclass
class GateActivations:
    r: np.ndarray
    z: np.ndarray


@dataclass
class _StepCache:
    h_prev: np.ndarray
    h_cols: np.ndarray
    rh_cols: np.ndarray
    r: np.ndarray
    z: np.ndarray
    cand: np.ndarray


class CGru:
    def __init__(self, channels: int, rng: np.random.Generator | None = None, dtype=T.DEFAULT_DTYPE):
        self.channels = channels
        self.dtype = dtype
        rng = np.random.default_rng(0) if rng is None else rng
        fan_in = channels * 9
        self.params: dict[str, Param] = {}
        for key in WEIGHT_KEYS:
            self.params[key] = Param(T.kaiming_uniform((channels, channels, 3, 3), fan_in, rng, dtype))
        for key in BIAS_KEYS:
            self.params[key] = Param(np.zeros(channels, dtype=dtype))
        self._spec_x = ConvSpec(channels, 3 * channels, (3, 3), (1, 1), (1, 1))
        self._trace: list[_StepCache] | None = None
        self._x_cache: T.ConvCache | None = None
        self._x_param: tuple[Param, Param] | None = None
        self.grad_h0: np.ndarray | None = None

    # -- stacked views -----------------------------------------------------

    def _stacked_x(self) -> tuple[Param, Param]:
        p = self.params
        w = np.concatenate([p["W_xr"].value, p["W_xz"].value, p["W_x"].value])
        b = np.concatenate([p["b_r"].value, p["b_z"].value, p["b"].value])
        return Param(w), Param(b)

    def _stacked_h(self) -> tuple[np.ndarray, np.ndarray]:
        p, d = self.params, self.channels
        w_rz = np.concatenate([p["W_hr"].value, p["W_hz"].value]).reshape(2 * d, -1)
        return w_rz, p["W_h"].value.reshape(d, -1)

    def _check(self, h: np.ndarray, x: np.ndarray) -> None:
        if h.shape != x.shape or x.ndim != 3 or x.shape[0] != self.channels:
            raise ShapeError(f"state {h.shape} and input {x.shape} must both be {self.channels} x H x W")

    # -- forward ------------------------------------------------------------

    def input_transform(self, xs: np.ndarray) -> np.ndarray:
        """Input-side pre-activations ``[W_xr*x + b_r; W_xz*x + b_z; W_x*x + b]``.

        Takes one ``D x H x W`` map or a ``K x D x H x W`` stack.
        """
        w, b = self._stacked_x()
        return T.conv2d(xs, w, b, self._spec_x)

    def _recurrent(self, h_prev, xa, w_rz, w_h, keep: bool):
        d = self.channels
        h_cols, hw = T.im2col(h_prev[None], (3, 3), (1, 1), (1, 1))
        a_rz = (w_rz @ h_cols).reshape(2 * d, *h_prev.shape[1:]) + xa[: 2 * d]
        rz = T.activation(a_rz, "sigmoid")
        r, z = rz[:d], rz[d:]
        rh = r * h_prev
        rh_cols, _ = T.im2col(rh[None], (3, 3), (1, 1), (1, 1))
        a_c = (w_h @ rh_cols).reshape(h_prev.shape) + xa[2 * d :]
        cand = np.tanh(a_c)
        h = T.blend(z, h_prev, cand)
        cache = _StepCache(h_prev, h_cols, rh_cols, r, z, cand) if keep else None
        return h, cache

    def gates(self, h_prev: np.ndarray, x: np.ndarray) -> GateActivations:
        self._check(h_prev, x)
        d = self.channels
        xa = self.input_transform(x)
        w_rz, _ = self._stacked_h()
        h_cols, _ = T.im2col(h_prev[None], (3, 3), (1, 1), (1, 1))
        rz = T.activation((w_rz @ h_cols).reshape(2 * d, *h_prev.shape[1:]) + xa[: 2 * d], "sigmoid")
        return GateActivations(r=rz[:d], z=rz[d:])

    def step(self, h_prev: np.ndarray, x: np.ndarray) -> np.ndarray:
        self._check(h_prev, x)
        w_rz, w_h = self._stacked_h()
        h, _ = self._recurrent(h_prev, self.input_transform(x), w_rz, w_h, keep=False)
        return h

    def zero_state(self, spatial: tuple[int, int]) -> np.ndarray:
        return np.zeros((self.channels, *spatial), dtype=self.dtype)

    def unroll(self, xs: np.ndarray, h0: np.ndarray | None = None, train: bool = False) -> np.ndarray:
        """Run the recurrence over a ``K x D x H x W`` stack and return all states."""
        if len(xs) == 0:
            raise ValueError("cannot unroll an empty sequence")
        if xs.ndim != 4 or xs.shape[1] != self.channels:
            raise ShapeError(f"expected K x {self.channels} x H x W features, got {xs.shape}")
        h = self.zero_state(xs.shape[2:]) if h0 is None else h0
        self._check(h, xs[0])
        w_x, b_x = self._stacked_x()
        w_rz, w_h = self._stacked_h()
        states = np.empty_like(xs)
        trace = []
        for t in range(len(xs)):
            # per frame, so unroll is bit-identical to repeated step()
            xa = T.conv2d(xs[t], w_x, b_x, self._spec_x)
            h, cache = self._recurrent(h, xa, w_rz, w_h, keep=train)
            states[t] = h
            trace.append(cache)
        if train:
            # input-side backward runs batched over time
            cols, out_hw = T.im2col(xs, (3, 3), (1, 1), (1, 1))
            x_cache = T.ConvCache(xs.shape, False, cols, out_hw, w_x, b_x, self._spec_x)
            self._trace, self._x_cache, self._x_param = trace, x_cache, (w_x, b_x)
        else:
            self._trace = self._x_cache = self._x_param = None
        return states

    # -- backward -------------------------------------------------------------

    def bptt(self, grad_states: np.ndarray) -> np.ndarray:
        """Full backpropagation through time.

        ``grad_states[t]`` is the loss gradient arriving at ``h[t]`` from outside
        the recurrence. Weight gradients (summed over time) are accumulated into
        ``params``; the gradient w.r.t. every input map ``x[t]`` is returned and
        the gradient w.r.t. the initial state is left in ``grad_h0``.
        """
        if self._trace is None:
            raise RuntimeError("bptt requires a preceding unroll(..., train=True)")
        trace = self._trace
        if grad_states.shape[0] != len(trace):
            raise ShapeError(f"got {grad_states.shape[0]} state gradients for {len(trace)} steps")
        d = self.channels
        w_rz, w_h = self._stacked_h()
        spatial = grad_states.shape[2:]
        x_shape = (1, d, *spatial)
        hw = spatial[0] * spatial[1]
        k = len(trace)

        da_x = np.empty((k, 3 * d, *spatial), dtype=grad_states.dtype)
        da_rz_all = np.empty((2 * d, k * hw), dtype=grad_states.dtype)
        da_c_all = np.empty((d, k * hw), dtype=grad_states.dtype)
        carry = np.zeros_like(grad_states[0])
        for t in range(k - 1, -1, -1):
            c = trace[t]
            dh = grad_states[t] + carry
            dz, dh_prev, dcand = T.blend_backward(dh, c.z, c.h_prev, c.cand)
            da_c = T.activation_backward(dcand, c.cand, "tanh").reshape(d, hw)
            drh = T.col2im(w_h.T @ da_c, x_shape, (3, 3), (1, 1), (1, 1), spatial)[0]
            dr, dh_from_rh = T.elementwise_backward(drh, c.r, c.h_prev, "mul")
            dh_prev += dh_from_rh
            da_r = T.activation_backward(dr, c.r, "sigmoid")
            da_z = T.activation_backward(dz, c.z, "sigmoid")
            da_rz = np.concatenate([da_r, da_z]).reshape(2 * d, hw)
            dh_prev += T.col2im(w_rz.T @ da_rz, x_shape, (3, 3), (1, 1), (1, 1), spatial)[0]
            da_x[t, : 2 * d] = da_rz.reshape(2 * d, *spatial)
            da_x[t, 2 * d :] = da_c.reshape(d, *spatial)
            da_rz_all[:, t * hw : (t + 1) * hw] = da_rz
            da_c_all[:, t * hw : (t + 1) * hw] = da_c
            carry = dh_prev
        self.grad_h0 = carry

        p = self.params
        h_cols_all = np.concatenate([c.h_cols for c in trace], axis=1)
        rh_cols_all = np.concatenate([c.rh_cols for c in trace], axis=1)
        g_rz = (da_rz_all @ h_cols_all.T).reshape(2 * d, d, 3, 3)
        p["W_hr"].grad += g_rz[:d]
        p["W_hz"].grad += g_rz[d:]
        p["W_h"].grad += (da_c_all @ rh_cols_all.T).reshape(d, d, 3, 3)

        w_x, b_x = self._x_param
        w_x.grad[...] = 0
        b_x.grad[...] = 0
        grad_xs = T.conv2d_backward(da_x, self._x_cache)
        for i, (wk, bk) in enumerate((("W_xr", "b_r"), ("W_xz", "b_z"), ("W_x", "b"))):
            p[wk].grad += w_x.grad[i * d : (i + 1) * d]
            p[bk].grad += b_x.grad[i * d : (i + 1) * d]
        return grad_xs


class StreamingCGru:
    """Frozen-weight recurrence for frame-by-frame inference.

    Stacks the weights once so each ``push`` costs three GEMMs.
    """

    def __init__(self, cell: CGru, spatial: tuple[int, int]):
        self.cell = cell
        self._w_x, self._b_x = cell._stacked_x()
        self._w_x2 = self._w_x.value.reshape(3 * cell.channels, -1)
        self._w_rz, self._w_h = cell._stacked_h()
        self.spatial = spatial
        self.reset()

    def reset(self) -> None:
        self.h = self.cell.zero_state(self.spatial)

    def push(self, x: np.ndarray) -> np.ndarray:
        cols, _ = T.im2col(x[None], (3, 3), (1, 1), (1, 1))
        xa = (self._w_x2 @ cols).reshape(3 * self.cell.channels, *self.spatial)
        xa += self._b_x.value[:, None, None]
        self.h, _ = self.cell._recurrent(self.h, xa, self._w_rz, self._w_h, keep=False)
        return self.h
