"""Procedural pulsatile-vessel ultrasound phantoms.

Each frame shows a dark horizontal lumen band bounded by two bright wall
lines on a mid-grey tissue background. The lumen width follows an
asymmetric periodic pulse (fast rise, slow decay), the band drifts slowly in
depth, and frames carry multiplicative Rayleigh speckle plus a per-frame gain
jitter. The exact diameter of every frame is recorded as ground truth.
"""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

PIXEL_PITCH = 0.0625  # mm / pixel at 128 x 128
FRAME_RATE = 47.0
FRAME_SIZE = 128

TISSUE_LEVEL = 0.35
LUMEN_LEVEL = 0.05
WALL_THICKNESS_MM = 0.25

_PULSE_HARMONIC = 0.3
_grid = np.linspace(0.0, 2.0 * np.pi, 200_001)
_PULSE_SCALE = float(np.max(np.sin(_grid) + _PULSE_HARMONIC * np.sin(2 * _grid)))
del _grid


def pulse(theta) -> np.ndarray:
    """Periodic waveform in [-1, 1]; the rise takes ~40% of the cycle, the decay the rest."""
    theta = np.asarray(theta, dtype=np.float64)
    return (np.sin(theta) + _PULSE_HARMONIC * np.sin(2 * theta)) / _PULSE_SCALE


@dataclass(frozen=True)
class PhantomSpec:
    d0: float = 4.5  # baseline diameter, mm
    amplitude: float = 0.4  # mm
    period: int = 20  # frames
    phase: float = 0.0  # rad
    drift_amplitude: float = 0.1  # mm; sign sets the drift direction
    drift_period: float = 150.0  # frames
    speckle: float = 0.6  # 0 disables speckle
    wall_brightness: float = 0.85
    gain_jitter: float = 0.05  # std of the per-frame gain factor; 0 disables it
    clutter: float = 0.0  # std of the additive noise floor; 0 disables it

    def validate(self) -> None:
        if self.d0 - self.amplitude <= 0:
            raise ValueError(f"d0 - amplitude must be positive (d0={self.d0}, amplitude={self.amplitude})")
        if self.amplitude < 0:
            raise ValueError("amplitude must be non-negative")
        if self.period < 8:
            raise ValueError(f"period must be at least 8 frames, got {self.period}")
        if self.drift_period <= 0:
            raise ValueError("drift_period must be positive")
        if not 0.0 <= self.speckle <= 1.0:
            raise ValueError("speckle strength must lie in [0, 1]")
        if self.clutter < 0:
            raise ValueError("clutter must be non-negative")

    def noise_free(self) -> "PhantomSpec":
        return replace(self, speckle=0.0, gain_jitter=0.0, clutter=0.0)


@dataclass(frozen=True)
class SpecRanges:
    d0: tuple[float, float] = (3.0, 6.0)
    amplitude: tuple[float, float] = (0.2, 0.6)
    period: tuple[int, int] = (15, 30)
    frames: tuple[int, int] = (21, 126)
    drift_amplitude: tuple[float, float] = (0.0, 0.2)
    drift_period: tuple[float, float] = (80.0, 250.0)
    # dataset defaults: fully developed speckle, an additive floor that reaches the lumen
    speckle: float = 1.0
    gain_jitter: float = 0.15
    clutter: float = 0.1


def sample_spec(rng: np.random.Generator, ranges: SpecRanges = SpecRanges()) -> PhantomSpec:
    sign = 1.0 if rng.random() < 0.5 else -1.0
    return PhantomSpec(
        d0=float(rng.uniform(*ranges.d0)),
        amplitude=float(rng.uniform(*ranges.amplitude)),
        period=int(rng.integers(ranges.period[0], ranges.period[1] + 1)),
        phase=float(rng.uniform(0.0, 2.0 * np.pi)),
        drift_amplitude=sign * float(rng.uniform(*ranges.drift_amplitude)),
        drift_period=float(rng.uniform(*ranges.drift_period)),
        speckle=ranges.speckle,
        gain_jitter=ranges.gain_jitter,
        clutter=ranges.clutter,
    )


@dataclass
class UltrasoundSequence:
    frames: np.ndarray  # K x N x M float32 in [0, 1]
    diameters: np.ndarray  # K float32, mm
    frame_rate: float = FRAME_RATE
    pixel_pitch: float = PIXEL_PITCH
    seed: int = 0
    true_period: int | None = None
    name: str = ""

    def __post_init__(self):
        if self.frames.ndim != 3:
            raise ValueError(f"frames must be K x N x M, got {self.frames.shape}")
        if len(self.diameters) != len(self.frames):
            raise ValueError("one diameter per frame required")
        if len(self.frames) < 1:
            raise ValueError("a sequence needs at least one frame")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def size(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]

    def stack(self) -> np.ndarray:
        """Frames as a ``K x 1 x N x M`` network input."""
        return self.frames[:, None]


class VesselOutOfFrameError(ValueError):
    pass


def diameter_trace(spec: PhantomSpec, k: int) -> np.ndarray:
    t = np.arange(k)
    # t mod T keeps the trace exactly periodic in floating point
    theta = 2.0 * np.pi * (t % spec.period) / spec.period + spec.phase
    return spec.d0 + spec.amplitude * pulse(theta)


def center_trace(spec: PhantomSpec, k: int, size: int, pixel_pitch: float) -> np.ndarray:
    """Lumen centre row per frame, in pixel coordinates."""
    t = np.arange(k)
    drift_px = spec.drift_amplitude / pixel_pitch
    return (size - 1) / 2.0 + drift_px * np.sin(2.0 * np.pi * t / spec.drift_period)


def _coverage(rows: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Fraction of each pixel row ``[r - 0.5, r + 0.5]`` inside ``[lo, hi]``."""
    return np.clip(np.minimum(hi, rows + 0.5) - np.maximum(lo, rows - 0.5), 0.0, 1.0)


def row_profiles(spec: PhantomSpec, diameters: np.ndarray, centers: np.ndarray, size: int,
                 pixel_pitch: float) -> np.ndarray:
    """Noise-free intensity per (frame, row); K x N."""
    rows = np.arange(size, dtype=np.float64)[None, :]
    half = (diameters / pixel_pitch / 2.0)[:, None]
    c = centers[:, None]
    wall = WALL_THICKNESS_MM / pixel_pitch
    top, bottom = c - half, c + half
    if np.any(top - wall < -0.5) or np.any(bottom + wall > size - 0.5):
        raise VesselOutOfFrameError(
            f"vessel with diameter up to {diameters.max():.2f} mm does not fit a {size}-pixel frame"
        )
    lumen = _coverage(rows, top, bottom)
    walls = _coverage(rows, top - wall, top) + _coverage(rows, bottom, bottom + wall)
    tissue = 1.0 - lumen - walls
    return TISSUE_LEVEL * tissue + spec.wall_brightness * walls + LUMEN_LEVEL * lumen


def generate(spec: PhantomSpec, k: int, seed: int, size: int = FRAME_SIZE,
             pixel_pitch: float = PIXEL_PITCH, frame_rate: float = FRAME_RATE) -> UltrasoundSequence:
    spec.validate()
    if k < 1:
        raise ValueError("k must be at least 1")
    diameters = diameter_trace(spec, k)
    centers = center_trace(spec, k, size, pixel_pitch)
    profile = row_profiles(spec, diameters, centers, size, pixel_pitch)
    frames = np.repeat(profile[:, :, None], size, axis=2)

    rng = np.random.default_rng(seed)
    if spec.speckle > 0:
        # unit-mean Rayleigh field, smoothed over 3x3 to give speckle a grain size
        field = rng.rayleigh(scale=math.sqrt(2.0 / math.pi), size=frames.shape)
        field = uniform_filter(field, size=(1, 3, 3), mode="reflect")
        frames *= (1.0 - spec.speckle) + spec.speckle * field
    if spec.gain_jitter > 0:
        frames *= (1.0 + spec.gain_jitter * rng.standard_normal(k))[:, None, None]
    if spec.clutter > 0:
        # additive noise floor with the speckle grain; x3 restores unit std after the box filter
        noise = uniform_filter(rng.standard_normal(frames.shape), size=(1, 3, 3), mode="reflect")
        frames += 3.0 * spec.clutter * noise
    np.clip(frames, 0.0, 1.0, out=frames)
    return UltrasoundSequence(
        frames=frames.astype(np.float32),
        diameters=diameters.astype(np.float32),
        frame_rate=frame_rate,
        pixel_pitch=pixel_pitch,
        seed=seed,
        true_period=spec.period,
    )


def augment_flip(seq: UltrasoundSequence, horizontal: bool, vertical: bool) -> UltrasoundSequence:
    """Apply one flip to every frame; diameters are unchanged."""
    frames = seq.frames
    if vertical:
        frames = frames[:, ::-1, :]
    if horizontal:
        frames = frames[:, :, ::-1]
    return replace(seq, frames=np.ascontiguousarray(frames))


# ----------------------------------------------------------------------------
# dataset split


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[str, ...]
    validation: tuple[str, ...]
    test: tuple[str, ...]
    fractions: tuple[float, float, float]


def split(ids, fractions=(0.6, 0.2, 0.2), seed: int = 0) -> DatasetSplit:
    """Seeded shuffle, then validation/test take floor-sized shares and training the rest."""
    ids = list(ids)
    if not ids:
        raise ValueError("cannot split an empty id list")
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n = len(ids)
    n_val = int(math.floor(fractions[1] * n + 1e-9))
    n_test = int(math.floor(fractions[2] * n + 1e-9))
    n_train = n - n_val - n_test
    return DatasetSplit(
        train=tuple(shuffled[:n_train]),
        validation=tuple(shuffled[n_train : n_train + n_val]),
        test=tuple(shuffled[n_train + n_val :]),
        fractions=tuple(fractions),
    )


# ----------------------------------------------------------------------------
# .usq files

USQ_MAGIC = b"USQ1"
USQ_VERSION = 1
_USQ_HEADER = struct.Struct("<4sIIIIffQ")


class UsqFormatError(ValueError):
    pass


class BadMagicError(UsqFormatError):
    pass


class UnsupportedVersionError(UsqFormatError):
    pass


class TruncatedFileError(UsqFormatError):
    pass


@dataclass(frozen=True)
class UsqHeader:
    k: int
    n: int
    m: int
    frame_rate: float
    pixel_pitch: float
    seed: int

    @property
    def payload_bytes(self) -> int:
        return self.k * self.n * self.m * 4


def write_sequence(path, seq: UltrasoundSequence) -> None:
    k, n, m = seq.frames.shape
    with open(path, "wb") as fh:
        fh.write(_USQ_HEADER.pack(USQ_MAGIC, USQ_VERSION, k, n, m, seq.frame_rate, seq.pixel_pitch, seq.seed))
        fh.write(np.ascontiguousarray(seq.diameters, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(seq.frames, dtype="<f4").tobytes())


def _read_exact(fh, count: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise TruncatedFileError(f"{what}: expected {count} bytes, got {len(data)}")
    return data


def read_header(fh) -> UsqHeader:
    raw = fh.read(_USQ_HEADER.size)
    if len(raw) >= 4 and raw[:4] != USQ_MAGIC:
        raise BadMagicError(f"not a .usq file (magic {raw[:4]!r})")
    if len(raw) != _USQ_HEADER.size:
        raise TruncatedFileError("truncated .usq header")
    _, version, k, n, m, fps, pitch, seed = _USQ_HEADER.unpack(raw)
    if version != USQ_VERSION:
        raise UnsupportedVersionError(f".usq version {version} is not supported (expected {USQ_VERSION})")
    return UsqHeader(k, n, m, float(fps), float(pitch), seed)


class SequenceReader:
    """Reads a .usq file frame by frame."""

    def __init__(self, path):
        self.path = Path(path)
        self._fh = open(self.path, "rb")
        try:
            self.header = read_header(self._fh)
            raw = _read_exact(self._fh, 4 * self.header.k, "diameters")
        except Exception:
            self._fh.close()
            raise
        self.diameters = np.frombuffer(raw, dtype="<f4").astype(np.float32)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self) -> None:
        self._fh.close()

    def __iter__(self):
        h = self.header
        for t in range(h.k):
            raw = _read_exact(self._fh, 4 * h.n * h.m, f"frame {t + 1}")
            yield np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(h.n, h.m)


def read_sequence(path) -> UltrasoundSequence:
    with SequenceReader(path) as reader:
        h = reader.header
        raw = _read_exact(reader._fh, h.payload_bytes, "pixel payload")
        frames = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(h.k, h.n, h.m)
        diameters = reader.diameters
    return UltrasoundSequence(frames=frames, diameters=diameters, frame_rate=h.frame_rate,
                              pixel_pitch=h.pixel_pitch, seed=h.seed, name=Path(path).stem)


def write_ground_truth_csv(path, seq: UltrasoundSequence) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame_index", "diameter_mm"])
        for t, d in enumerate(seq.diameters, start=1):
            w.writerow([t, repr(float(d))])
