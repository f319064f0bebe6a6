"""Training objective: MSE plus a periodicity penalty on the predicted trace."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import find_peaks

DEFAULT_LAMBDA = 1e-6
MIN_PERIOD = 8
PEAK_PROMINENCE = 0.25


class NoPeaksError(ValueError):
    """Fewer than two usable peaks; the periodicity term is disabled for this trace."""


class SequenceTooShortError(ValueError):
    pass


@dataclass
class DiameterTrace:
    y_hat: np.ndarray
    y: np.ndarray | None = None
    frame_rate: float = 47.0

    def __post_init__(self):
        self.y_hat = np.asarray(self.y_hat, dtype=np.float64)
        if self.y_hat.ndim != 1 or len(self.y_hat) < 1:
            raise ValueError("y_hat must be a non-empty 1-D series")
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=np.float64)
            if self.y.shape != self.y_hat.shape:
                raise ValueError(f"length mismatch: y has {len(self.y)} samples, y_hat {len(self.y_hat)}")


@dataclass(frozen=True)
class CycleInfo:
    period: int
    n_cycles: int


@dataclass(frozen=True)
class LossConfig:
    lam: float = DEFAULT_LAMBDA
    sqrt_epsilon: float = 1e-12

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")


def _require_truth(trace: DiameterTrace) -> np.ndarray:
    if trace.y is None:
        raise ValueError("ground truth y is required")
    return trace.y


def mse(trace: DiameterTrace) -> float:
    y = _require_truth(trace)
    return float(np.mean((y - trace.y_hat) ** 2))


def mse_grad(trace: DiameterTrace) -> np.ndarray:
    y = _require_truth(trace)
    return 2.0 * (trace.y_hat - y) / len(y)


def detect_period(y, frame_rate: float | None = None, min_period: int = MIN_PERIOD) -> CycleInfo:
    """Cardiac period (frames) from the mean spacing of prominent peaks in ``y``.

    Peaks must rise at least a quarter of the trace's range above their
    surroundings and sit ``min_period`` frames apart. ``frame_rate`` is
    accepted for interface symmetry; the period is returned in frames.
    """
    y = np.asarray(y, dtype=np.float64)
    if len(y) < 2 * min_period:
        raise NoPeaksError(f"trace of {len(y)} frames is shorter than two minimum periods")
    span = float(np.ptp(y))
    if span == 0.0:
        raise NoPeaksError("constant trace has no peaks")
    peaks, _ = find_peaks(y, prominence=PEAK_PROMINENCE * span, distance=min_period)
    if len(peaks) < 2:
        raise NoPeaksError(f"found {len(peaks)} peak(s), need at least 2")
    period = int(math.floor(float(np.mean(np.diff(peaks))) + 0.5))
    period = max(period, 2)
    return CycleInfo(period=period, n_cycles=len(y) // period)


def _pair_count(k: int, cycle: CycleInfo) -> int:
    p = min(cycle.n_cycles, k // cycle.period) - 1
    if p < 1:
        raise SequenceTooShortError(
            f"{k} frames hold fewer than two whole cycles of period {cycle.period}"
        )
    return p


def _cycle_differences(y_hat: np.ndarray, cycle: CycleInfo) -> np.ndarray:
    span = _pair_count(len(y_hat), cycle) * cycle.period
    return y_hat[:span] - y_hat[cycle.period : cycle.period + span]


def cyclic_loss(y_hat, cycle: CycleInfo, cfg: LossConfig | None = None) -> float:
    """Euclidean norm of the differences between samples one period apart."""
    d = _cycle_differences(np.asarray(y_hat, dtype=np.float64), cycle)
    return float(np.sqrt(np.sum(d * d)))


def cyclic_loss_grad(y_hat, cycle: CycleInfo, cfg: LossConfig | None = None) -> np.ndarray:
    cfg = cfg or LossConfig()
    y_hat = np.asarray(y_hat, dtype=np.float64)
    d = _cycle_differences(y_hat, cycle)
    s = float(np.sum(d * d))
    grad = np.zeros_like(y_hat)
    if s == 0.0:
        return grad
    g = d / math.sqrt(s + cfg.sqrt_epsilon)
    span, t = len(d), cycle.period
    grad[:span] += g
    grad[t : t + span] -= g
    return grad


def total_loss(trace: DiameterTrace, cycle: CycleInfo | None, cfg: LossConfig | None = None):
    """``MSE + lam * CL`` and its gradient w.r.t. ``y_hat``.

    ``cycle=None`` means no period was found; the loss is then plain MSE.
    """
    cfg = cfg or LossConfig()
    loss = mse(trace)
    grad = mse_grad(trace)
    if cycle is not None and cfg.lam > 0:
        loss += cfg.lam * cyclic_loss(trace.y_hat, cycle, cfg)
        grad += cfg.lam * cyclic_loss_grad(trace.y_hat, cycle, cfg)
    return loss, grad


def training_cycle(y) -> CycleInfo | None:
    """Period for the loss, or ``None`` when the trace cannot support the penalty."""
    try:
        cycle = detect_period(y)
        _pair_count(len(y), cycle)
    except (NoPeaksError, SequenceTooShortError):
        return None
    return cycle
