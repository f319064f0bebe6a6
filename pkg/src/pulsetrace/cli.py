"""Command-line entry point: ``pulsetrace {synth,train,eval,infer,bench}``.

Exit codes: 0 success, 1 usage/config error, 2 data/format error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_mod
from . import pipeline as P
from .loss import DEFAULT_LAMBDA
from .model import PROFILES, DiameterNet, get_profile
from .optim import DEFAULT_LR, NonFiniteGradientError
from .synthdata import (
    SequenceReader,
    SpecRanges,
    UsqFormatError,
    read_sequence,
    write_ground_truth_csv,
    write_sequence,
)

log = logging.getLogger("pulsetrace")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
REALTIME_FPS = 47.0
REFERENCE_FPS = 289.0


class ConfigError(Exception):
    pass


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _pair(cast):
    def parse(text: str):
        parts = [p for p in str(text).replace(",", " ").split() if p]
        if len(parts) != 2:
            raise ValueError(f"expected two values, got {text!r}")
        return cast(parts[0]), cast(parts[1])
    return parse


# key -> (type, default); every key may appear in the config file or as --flag
SETTINGS = {
    "seed": (int, 0),
    "profile": (str, "full"),
    "out": (str, "."),
    "count": (int, 25),
    "frames": (int, None),
    "frames_range": (_pair(int), SpecRanges.frames),
    "d0_range": (_pair(float), SpecRanges.d0),
    "amplitude_range": (_pair(float), SpecRanges.amplitude),
    "period_range": (_pair(int), SpecRanges.period),
    "speckle": (float, SpecRanges.speckle),
    "gain_jitter": (float, SpecRanges.gain_jitter),
    "clutter": (float, SpecRanges.clutter),
    "export_csv": (_bool, False),
    "data": (str, None),
    "epochs": (int, 100),
    "lr": (float, DEFAULT_LR),
    "lambda": (float, DEFAULT_LAMBDA),
    "augment": (_bool, True),
    "variant": (str, "cgru"),
    "checkpoint_every": (int, 0),
    "checkpoint": (str, None),
    "split": (str, "test"),
    "sequence": (str, None),
    "output": (str, None),
    "stream_length": (int, 500),
    "warmup": (int, 20),
}


def read_config(path) -> dict[str, object]:
    """Parse a UTF-8 ``key=value`` file; ``#`` starts a comment. Unknown keys are errors."""
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        if key not in SETTINGS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            values[key] = SETTINGS[key][0](value.strip())
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {exc}") from exc
    return values


def resolve(args: argparse.Namespace) -> dict[str, object]:
    """Defaults, then config file, then explicit flags."""
    cfg = {k: default for k, (_, default) in SETTINGS.items()}
    if getattr(args, "config", None):
        cfg.update(read_config(args.config))
    for key in SETTINGS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if cfg["profile"] not in PROFILES:
        raise ConfigError(f"unknown profile {cfg['profile']!r}")
    if cfg["variant"] not in ("cgru", "framewise"):
        raise ConfigError(f"unknown variant {cfg['variant']!r}")
    return cfg


# ----------------------------------------------------------------------------
# commands


def _ranges(cfg) -> SpecRanges:
    return SpecRanges(d0=cfg["d0_range"], amplitude=cfg["amplitude_range"], period=cfg["period_range"],
                      frames=cfg["frames_range"], speckle=cfg["speckle"], gain_jitter=cfg["gain_jitter"],
                      clutter=cfg["clutter"])


def cmd_synth(cfg) -> int:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    if cfg["count"] < 0:
        raise ConfigError("count must be non-negative")
    prof = get_profile(cfg["profile"])
    ranges = _ranges(cfg)
    rng = np.random.default_rng(cfg["seed"])
    from .synthdata import generate, sample_spec

    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "K", "T", "d0", "a"])
        for i in range(cfg["count"]):
            spec = sample_spec(rng, ranges)
            k = cfg["frames"] or int(rng.integers(ranges.frames[0], ranges.frames[1] + 1))
            seq = generate(spec, k, int(rng.integers(2**63 - 1)), size=prof.frame_size, pixel_pitch=prof.pixel_pitch)
            sid = f"seq{i:03d}"
            write_sequence(out / f"{sid}.usq", seq)
            if cfg["export_csv"]:
                write_ground_truth_csv(out / f"{sid}.csv", seq)
            w.writerow([sid, k, spec.period, f"{spec.d0:.6f}", f"{spec.amplitude:.6f}"])
    log.info("wrote %d sequences to %s", cfg["count"], out)
    return EXIT_OK


def load_sequences(data_dir) -> dict:
    data = Path(data_dir)
    if not data.is_dir():
        raise FileNotFoundError(f"data directory {data} does not exist")
    manifest = data / "manifest.csv"
    if manifest.exists():
        with open(manifest, newline="") as fh:
            ids = [row["id"] for row in csv.DictReader(fh)]
    else:
        ids = sorted(p.stem for p in data.glob("*.usq"))
    if not ids:
        raise FileNotFoundError(f"no sequences found in {data}")
    out = {}
    for sid in ids:
        seq = read_sequence(data / f"{sid}.usq")
        seq.name = sid
        out[sid] = seq
    return out


def _check_sizes(sequences, profile: str) -> None:
    size = get_profile(profile).frame_size
    for sid, seq in sequences.items():
        if seq.size != (size, size):
            raise ckpt_mod.ProfileMismatchError(
                f"sequence {sid} has {seq.size[0]}x{seq.size[1]} frames; profile {profile!r} needs {size}x{size}"
            )


def cmd_train(cfg) -> int:
    if not cfg["data"]:
        raise ConfigError("train needs --data DIR")
    sequences = load_sequences(cfg["data"])
    _check_sizes(sequences, cfg["profile"])
    dataset = P.default_split(sequences, cfg["seed"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    tc = P.TrainConfig(epochs=cfg["epochs"], lr=cfg["lr"], lam=cfg["lambda"], seed=cfg["seed"],
                       profile=cfg["profile"], recurrent=cfg["variant"] == "cgru", augment=cfg["augment"],
                       checkpoint_every=cfg["checkpoint_every"])

    def periodic(epoch, ck):
        ckpt_mod.save(out / f"checkpoint_epoch{epoch:04d}.ptck", ck)

    result = P.train(sequences, dataset, tc, on_checkpoint=periodic)
    ckpt_mod.save(out / "checkpoint.ptck", result.checkpoint)
    with open(out / "loss_history.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "train_mse_mm2", "val_mse_mm2"])
        for r in result.history:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.train_mse), repr(r.val_mse)])
    print(f"trained {tc.epochs} epochs ({result.steps} steps); best validation epoch {result.best_epoch}")
    return EXIT_OK


def write_report(path, report: P.EvalReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sequence_id", "mse_mm2", "re_percent"])
        for s in report.scores:
            w.writerow([s.sequence_id, f"{s.mse:.8f}", f"{s.re:.6f}"])


def cmd_eval(cfg) -> int:
    if not cfg["checkpoint"] or not cfg["data"]:
        raise ConfigError("eval needs --checkpoint PATH and --data DIR")
    ck = ckpt_mod.load(cfg["checkpoint"])
    net = ckpt_mod.to_model(ck, cfg["profile"])
    sequences = load_sequences(cfg["data"])
    if cfg["split"] == "all":
        chosen = sequences
    elif cfg["split"] in ("test", "validation", "train"):
        ids = getattr(P.default_split(sequences, cfg["seed"]), cfg["split"])
        chosen = {i: sequences[i] for i in ids}
    else:
        raise ConfigError(f"unknown split {cfg['split']!r}")
    report = P.evaluate(net, chosen, expected_profile=cfg["profile"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_report(out / "report.csv", report)
    (out / "summary.txt").write_text(report.summary(), encoding="utf-8")
    print(report.summary(), end="")
    return EXIT_OK


def cmd_infer(cfg) -> int:
    if not cfg["checkpoint"] or not cfg["sequence"]:
        raise ConfigError("infer needs --checkpoint PATH and --sequence FILE")
    net = ckpt_mod.to_model(ckpt_mod.load(cfg["checkpoint"]), cfg["profile"])
    size = net.profile.frame_size
    with SequenceReader(cfg["sequence"]) as reader:
        if (reader.header.n, reader.header.m) != (size, size):
            raise ckpt_mod.ProfileMismatchError(
                f"sequence frames are {reader.header.n}x{reader.header.m}; profile needs {size}x{size}"
            )
        truth = reader.diameters
        has_truth = bool(np.all(truth > 0))
        sink = open(cfg["output"], "w", newline="") if cfg["output"] else nullcontext(sys.stdout)
        with sink as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["frame_index", "y_pred_mm"] + (["y_true_mm"] if has_truth else []))
            stream = net.streamer()
            for t, frame in enumerate(reader, start=1):
                y = stream.push(frame)
                row = [t, f"{y:.6f}"] + ([f"{float(truth[t - 1]):.6f}"] if has_truth else [])
                w.writerow(row)
                fh.flush()
    return EXIT_OK


def fps(frames: int, elapsed: float) -> float:
    return frames / elapsed


def run_bench(net: DiameterNet, frames: np.ndarray, warmup: int) -> list[dict]:
    stream = net.streamer()
    stream.timed = True
    for f in frames[:warmup]:
        stream.push(f)
    stream.reset()
    latencies = []
    start = time.perf_counter()
    for f in frames[warmup:]:
        t0 = time.perf_counter()
        stream.push(f)
        latencies.append(time.perf_counter() - t0)
    elapsed = time.perf_counter() - start
    n = len(latencies)
    rate = fps(n, elapsed)
    lines = []
    for stage in stream.STAGES:
        lat = np.array(stream.timings[stage]) * 1e3
        lines.append({"event": "stage", "stage": stage, "mean_ms": float(lat.mean()),
                      "p99_ms": float(np.percentile(lat, 99))})
    lat = np.array(latencies) * 1e3
    lines.append({
        "event": "summary",
        "profile": net.profile.name,
        "variant": net.variant,
        "frames": n,
        "elapsed_s": elapsed,
        "fps": rate,
        "mean_latency_ms": float(lat.mean()),
        "p99_latency_ms": float(np.percentile(lat, 99)),
        "real_time": rate >= REALTIME_FPS,
        "acquisition_fps": REALTIME_FPS,
        "reference_fps": REFERENCE_FPS,
    })
    return lines


def cmd_bench(cfg) -> int:
    from .synthdata import PhantomSpec, generate

    if cfg["checkpoint"]:
        net = ckpt_mod.to_model(ckpt_mod.load(cfg["checkpoint"]), cfg["profile"])
    else:
        net = DiameterNet(cfg["profile"], recurrent=cfg["variant"] == "cgru", seed=cfg["seed"])
    prof = net.profile
    total = cfg["warmup"] + cfg["stream_length"]
    if cfg["stream_length"] < 1:
        raise ConfigError("stream_length must be at least 1")
    seq = generate(PhantomSpec(), total, cfg["seed"], size=prof.frame_size, pixel_pitch=prof.pixel_pitch)
    lines = run_bench(net, seq.frames, cfg["warmup"])
    for line in lines:
        print(json.dumps(line))
    if cfg["out"] != ".":
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "bench.jsonl", "w") as fh:
            for line in lines:
                fh.write(json.dumps(line) + "\n")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer, "bench": cmd_bench}


# ----------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _global_flags(parser: argparse.ArgumentParser, default) -> None:
    parser.add_argument("--config", default=default, help="key=value config file")
    parser.add_argument("--seed", type=int, default=default)
    parser.add_argument("--profile", choices=PROFILES, default=default)
    parser.add_argument("--out", default=default, help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true", default=default)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pulsetrace", description="Vessel diameter regression on ultrasound sequences.")
    _global_flags(parser, None)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        _global_flags(p, argparse.SUPPRESS)
        return p

    p = add("synth", "generate synthetic phantom sequences")
    p.add_argument("--count", type=int)
    p.add_argument("--frames", type=int, help="fixed K for every sequence")
    p.add_argument("--frames-range", dest="frames_range", type=int, nargs=2)
    p.add_argument("--d0-range", dest="d0_range", type=float, nargs=2)
    p.add_argument("--amplitude-range", dest="amplitude_range", type=float, nargs=2)
    p.add_argument("--period-range", dest="period_range", type=int, nargs=2)
    p.add_argument("--speckle", type=float)
    p.add_argument("--gain-jitter", dest="gain_jitter", type=float)
    p.add_argument("--clutter", type=float, help="std of the additive noise floor")
    p.add_argument("--export-csv", dest="export_csv", action="store_const", const=True)

    p = add("train", "train a model")
    p.add_argument("--data")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda", dest="lambda", type=float)
    p.add_argument("--no-augment", dest="augment", action="store_const", const=False)
    p.add_argument("--variant", choices=("cgru", "framewise"))
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)

    p = add("eval", "evaluate a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--split", choices=("test", "validation", "train", "all"))

    p = add("infer", "stream per-frame predictions for one sequence")
    p.add_argument("--checkpoint")
    p.add_argument("--sequence")
    p.add_argument("--output", help="CSV path (default stdout)")

    p = add("bench", "measure streaming inference throughput")
    p.add_argument("--checkpoint")
    p.add_argument("--variant", choices=("cgru", "framewise"))
    p.add_argument("--stream-length", dest="stream_length", type=int)
    p.add_argument("--warmup", type=int)
    return parser


def _thread_limit():
    raw = os.environ.get("PULSETRACE_THREADS")
    if not raw:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(raw)))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        with _thread_limit():
            return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"pulsetrace: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (P.DivergenceError, NonFiniteGradientError, FloatingPointError) as exc:
        print(f"pulsetrace: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsqFormatError, ckpt_mod.CheckpointError, OSError, ValueError) as exc:
        print(f"pulsetrace: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
