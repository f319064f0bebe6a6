"""Training loop, evaluation metrics and statistical comparison."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import kstwobign

from . import checkpoint as ckpt_mod
from .checkpoint import Checkpoint
from .loss import DiameterTrace, LossConfig, cyclic_loss, total_loss, training_cycle
from .model import DiameterNet, get_profile
from .optim import DEFAULT_LR, Adam, NonFiniteGradientError
from .synthdata import (
    DatasetSplit,
    SpecRanges,
    UltrasoundSequence,
    augment_flip,
    generate,
    sample_spec,
    split,
)

log = logging.getLogger(__name__)

BONFERRONI_COMPARISONS = 7
ALPHA = 0.05


class DivergenceError(FloatingPointError):
    def __init__(self, sequence_id: str, detail: str = "loss is not finite"):
        super().__init__(f"training diverged on sequence {sequence_id!r}: {detail}")
        self.sequence_id = sequence_id


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = DEFAULT_LR
    lam: float = 1e-6
    seed: int = 0
    profile: str = "full"
    recurrent: bool = True
    augment: bool = True
    checkpoint_every: int = 0  # epochs; 0 keeps only the best-validation snapshot in memory

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        get_profile(self.profile)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_mse: float
    val_mse: float


@dataclass
class TrainResult:
    model: DiameterNet
    checkpoint: Checkpoint
    history: list[EpochRecord]
    best_epoch: int
    steps: int


def _snapshot(net: DiameterNet) -> dict[str, np.ndarray]:
    return {k: p.value.copy() for k, p in net.params.items()}


def _restore(net: DiameterNet, snap: dict[str, np.ndarray]) -> None:
    for k, p in net.params.items():
        p.value[...] = snap[k]


def predict_sequence(net: DiameterNet, seq: UltrasoundSequence) -> np.ndarray:
    return net.forward_sequence(seq.stack()).astype(np.float64)


def train(sequences: dict[str, UltrasoundSequence], dataset: DatasetSplit, cfg: TrainConfig,
          on_checkpoint=None, net: DiameterNet | None = None) -> TrainResult:
    """Per-sequence Adam steps over the training split with best-validation selection.

    ``on_checkpoint(epoch, checkpoint)`` is called every ``cfg.checkpoint_every``
    epochs when set.
    """
    if not dataset.train:
        raise ValueError("training split is empty")
    rng = np.random.default_rng(cfg.seed)
    if net is None:
        net = DiameterNet(cfg.profile, recurrent=cfg.recurrent, seed=cfg.seed)
        # start the scalar output at the mean training diameter
        mean_d = float(np.mean(np.concatenate([sequences[i].diameters for i in dataset.train])))
        net.head.output_bias.value[...] = mean_d
    opt = Adam(net.params, lr=cfg.lr)
    loss_cfg = LossConfig(lam=cfg.lam)
    cycles = {i: training_cycle(sequences[i].diameters) for i in dataset.train}

    history: list[EpochRecord] = []
    best = (math.inf, 0, _snapshot(net))
    steps = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(dataset.train))
        losses, mses = [], []
        for idx in order:
            sid = dataset.train[idx]
            seq = sequences[sid]
            if cfg.augment:
                hflip, vflip = rng.random(2) < 0.5
                seq = augment_flip(seq, horizontal=bool(hflip), vertical=bool(vflip))
            y_hat = net.forward_sequence(seq.stack(), train=True).astype(np.float64)
            trace = DiameterTrace(y_hat, seq.diameters, seq.frame_rate)
            loss, grad = total_loss(trace, cycles[sid], loss_cfg)
            if not np.isfinite(loss):
                raise DivergenceError(sid)
            net.backward(grad)
            try:
                opt.step()
            except NonFiniteGradientError as exc:
                raise DivergenceError(sid, str(exc)) from exc
            steps += 1
            losses.append(loss)
            mses.append(float(np.mean((y_hat - seq.diameters) ** 2)))
        if dataset.validation:
            val = float(np.mean([_mse(net, sequences[i]) for i in dataset.validation]))
        else:
            val = float(np.mean(mses))
        history.append(EpochRecord(epoch, float(np.mean(losses)), float(np.mean(mses)), val))
        log.info("epoch %d loss %.5f train_mse %.5f val_mse %.5f", epoch, history[-1].train_loss,
                 history[-1].train_mse, val)
        if val < best[0]:
            best = (val, epoch, _snapshot(net))
        if on_checkpoint is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            on_checkpoint(epoch, ckpt_mod.from_model(net, opt, _metadata(cfg, epoch, history)))

    _, best_epoch, snap = best
    _restore(net, snap)
    checkpoint = ckpt_mod.from_model(net, None, _metadata(cfg, best_epoch, history))
    return TrainResult(net, checkpoint, history, best_epoch, steps)


def _metadata(cfg: TrainConfig, epoch: int, history: list[EpochRecord]) -> dict:
    return {
        "epoch": epoch,
        "seed": cfg.seed,
        "lr": repr(cfg.lr),
        "lambda": repr(cfg.lam),
        "loss_curve": ",".join(repr(r.train_loss) for r in history),
    }


def _mse(net: DiameterNet, seq: UltrasoundSequence) -> float:
    return float(np.mean((predict_sequence(net, seq) - seq.diameters) ** 2))


# ----------------------------------------------------------------------------
# evaluation


@dataclass
class SequenceScore:
    sequence_id: str
    mse: float  # mm^2
    re: float  # percent
    y_pred: np.ndarray
    y_true: np.ndarray


@dataclass
class EvalReport:
    scores: list[SequenceScore]
    mse_mean: float
    mse_std: float
    re_mean: float
    re_std: float
    frame_errors: np.ndarray = field(repr=False)

    def summary(self) -> str:
        return (
            f"sequences: {len(self.scores)}\n"
            f"MSE [mm^2]: {self.mse_mean:.4f} ({self.mse_std:.4f})\n"
            f"RE [%]: {self.re_mean:.2f} ({self.re_std:.2f})\n"
        )


def relative_error(y_pred, y_true) -> float:
    y_pred = np.asarray(y_pred, dtype=np.float64)
    y_true = np.asarray(y_true, dtype=np.float64)
    return float(100.0 * np.mean(np.abs(y_pred - y_true) / y_true))


def evaluate(model: DiameterNet | Checkpoint, sequences: dict[str, UltrasoundSequence] | list,
             expected_profile: str | None = None) -> EvalReport:
    """Per-sequence MSE and relative error; aggregates are mean (std) across sequences.

    Inference is blind to the cardiac period.
    """
    net = ckpt_mod.to_model(model, expected_profile) if isinstance(model, Checkpoint) else model
    if expected_profile is not None and net.profile.name != expected_profile:
        raise ckpt_mod.ProfileMismatchError(f"model profile {net.profile.name!r} != {expected_profile!r}")
    items = sequences.items() if isinstance(sequences, dict) else ((s.name, s) for s in sequences)
    scores = []
    for sid, seq in items:
        if seq.size != (net.profile.frame_size, net.profile.frame_size):
            raise ckpt_mod.ProfileMismatchError(
                f"sequence {sid!r} has {seq.size} frames, profile {net.profile.name!r} expects "
                f"{net.profile.frame_size}x{net.profile.frame_size}"
            )
        y_pred = predict_sequence(net, seq)
        y_true = seq.diameters.astype(np.float64)
        scores.append(SequenceScore(sid, float(np.mean((y_pred - y_true) ** 2)),
                                    relative_error(y_pred, y_true), y_pred, y_true))
    return report_from_scores(scores)


def report_from_scores(scores: list[SequenceScore]) -> EvalReport:
    if not scores:
        raise ValueError("no sequences to evaluate")
    mses = np.array([s.mse for s in scores])
    res = np.array([s.re for s in scores])
    errors = np.concatenate([np.abs(s.y_pred - s.y_true) for s in scores])
    return EvalReport(scores, float(mses.mean()), float(mses.std()), float(res.mean()), float(res.std()), errors)


# ----------------------------------------------------------------------------
# two-sample Kolmogorov-Smirnov


@dataclass(frozen=True)
class KsResult:
    statistic: float
    p_value: float
    alpha: float
    significant: bool


def ks_statistic(a, b) -> float:
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    if len(a) == 0 or len(b) == 0:
        raise ValueError("both samples must be non-empty")
    grid = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, grid, side="right") / len(a)
    cdf_b = np.searchsorted(b, grid, side="right") / len(b)
    return float(np.max(np.abs(cdf_a - cdf_b)))


def ks_compare(errors_a, errors_b, comparisons: int = BONFERRONI_COMPARISONS, alpha: float = ALPHA) -> KsResult:
    """Two-sample KS test with the asymptotic p-value and a Bonferroni-adjusted threshold."""
    d = ks_statistic(errors_a, errors_b)
    n, m = len(errors_a), len(errors_b)
    en = n * m / (n + m)
    p = float(kstwobign.sf(d * math.sqrt(en))) if d > 0 else 1.0
    threshold = alpha / comparisons
    return KsResult(d, min(max(p, 0.0), 1.0), threshold, p < threshold)


# ----------------------------------------------------------------------------
# synthetic datasets


def make_dataset(count: int, seed: int, profile: str = "test", frames: int | None = 125,
                 ranges: SpecRanges = SpecRanges()) -> dict[str, UltrasoundSequence]:
    """``count`` phantoms keyed ``seq000``...; ``frames=None`` samples K from ``ranges``."""
    prof = get_profile(profile)
    rng = np.random.default_rng(seed)
    out = {}
    for i in range(count):
        spec = sample_spec(rng, ranges)
        k = frames if frames is not None else int(rng.integers(ranges.frames[0], ranges.frames[1] + 1))
        sub_seed = int(rng.integers(2**63 - 1))
        seq = generate(spec, k, sub_seed, size=prof.frame_size, pixel_pitch=prof.pixel_pitch)
        seq.name = f"seq{i:03d}"
        out[seq.name] = seq
    return out


def mean_cyclic_loss(report: EvalReport) -> float:
    """Mean periodicity penalty of the predictions, using each truth trace's period."""
    vals = []
    for s in report.scores:
        cycle = training_cycle(s.y_true)
        if cycle is not None:
            vals.append(cyclic_loss(s.y_pred, cycle))
    return float(np.mean(vals)) if vals else float("nan")


def default_split(sequences: dict[str, UltrasoundSequence], seed: int) -> DatasetSplit:
    return split(sorted(sequences), (0.6, 0.2, 0.2), seed)
