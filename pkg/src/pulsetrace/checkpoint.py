"""PTCK checkpoint container.

Layout (little-endian)::

    b"PTCK" | u32 version | u32 metadata length | metadata (UTF-8 key=value lines)
    then, until EOF: u32 key length | key (UTF-8) | tensor blob
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import DiameterNet
from .optim import Adam
from .tensor import TensorFormatError, read_tensor, write_tensor

MAGIC = b"PTCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class MissingKeyError(CheckpointError, KeyError):
    pass


class PayloadSizeError(CheckpointError):
    pass


class ProfileMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    profile: str
    variant: str
    tensors: dict[str, np.ndarray]
    metadata: dict[str, str] = field(default_factory=dict)
    version: int = VERSION

    @property
    def optimizer_step(self) -> int | None:
        step = self.metadata.get("adam_step")
        return int(step) if step is not None else None

    def param_keys(self) -> list[str]:
        return [k for k in self.tensors if not k.startswith("adam.")]


def expected_keys(profile: str, variant: str) -> list[str]:
    return list(DiameterNet(profile, recurrent=(variant == "cgru")).params)


def from_model(net: DiameterNet, optimizer: Adam | None = None, metadata: dict | None = None) -> Checkpoint:
    tensors = {k: p.value.astype(np.float32, copy=True) for k, p in net.params.items()}
    meta = {str(k): str(v) for k, v in (metadata or {}).items()}
    if optimizer is not None:
        tensors.update({k: v.astype(np.float32, copy=True) for k, v in optimizer.state_arrays().items()})
        meta["adam_step"] = str(optimizer.t)
    return Checkpoint(net.profile.name, net.variant, tensors, meta)


def to_model(ckpt: Checkpoint, expected_profile: str | None = None, dtype=np.float32) -> DiameterNet:
    if expected_profile is not None and ckpt.profile != expected_profile:
        raise ProfileMismatchError(
            f"checkpoint was trained with profile {ckpt.profile!r}, run expects {expected_profile!r}"
        )
    net = DiameterNet(ckpt.profile, recurrent=(ckpt.variant == "cgru"), dtype=dtype)
    for key, p in net.params.items():
        if key not in ckpt.tensors:
            raise MissingKeyError(f"checkpoint lacks parameter {key!r}")
        value = ckpt.tensors[key]
        if value.shape != p.shape:
            raise PayloadSizeError(f"parameter {key!r} has shape {value.shape}, model expects {p.shape}")
        p.value[...] = value
    return net


def _format_metadata(meta: dict[str, str]) -> bytes:
    lines = []
    for k, v in meta.items():
        if "\n" in k or "=" in k or "\n" in v:
            raise CheckpointError(f"metadata entry {k!r} cannot be encoded as a key=value line")
        lines.append(f"{k}={v}")
    return "\n".join(lines).encode("utf-8")


def save(path, ckpt: Checkpoint) -> None:
    meta = {"profile": ckpt.profile, "variant": ckpt.variant, **ckpt.metadata}
    blob = _format_metadata(meta)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", ckpt.version, len(blob)))
        fh.write(blob)
        for key, value in ckpt.tensors.items():
            raw = key.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            write_tensor(fh, value)


def load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointError(f"{Path(path).name} is not a PTCK checkpoint")
        head = fh.read(8)
        if len(head) != 8:
            raise PayloadSizeError("truncated checkpoint header")
        version, meta_len = struct.unpack("<II", head)
        if version != VERSION:
            raise CheckpointVersionError(f"checkpoint version {version} is not supported (expected {VERSION})")
        raw = fh.read(meta_len)
        if len(raw) != meta_len:
            raise PayloadSizeError("truncated checkpoint metadata")
        meta = {}
        for line in raw.decode("utf-8").splitlines():
            if line:
                k, _, v = line.partition("=")
                meta[k] = v
        tensors = {}
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise PayloadSizeError("truncated record key length")
            (n,) = struct.unpack("<I", head)
            key_raw = fh.read(n)
            if len(key_raw) != n:
                raise PayloadSizeError("truncated record key")
            try:
                tensors[key_raw.decode("utf-8")] = read_tensor(fh)
            except TensorFormatError as exc:
                raise PayloadSizeError(f"record {key_raw.decode('utf-8')!r}: {exc}") from exc
    for required in ("profile", "variant"):
        if required not in meta:
            raise MissingKeyError(f"checkpoint metadata lacks {required!r}")
    profile = meta.pop("profile")
    variant = meta.pop("variant")
    return Checkpoint(profile, variant, tensors, meta, version)
