"""Versioned binary snapshots of trained models.

Layout (all integers little-endian)::

    magic      8 bytes  b"LFLOWCKP"
    version    u32
    kind       u16 length + utf-8   ("vae" | "flow")
    header     u32 length + utf-8   JSON: {"model": <architecture>, "config": <echo>}
    seed       i64
    n_entries  u32
    entries    n_entries x { name: u16 length + utf-8, ndim: u8,
                             shape: ndim x u64, data: prod(shape) x f64 (row-major) }

Loading rebuilds the architecture from the header and checks every entry's
name and shape against it, so nothing partial is ever returned.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .flow import FlowModel
from .vae import VaeModel

MAGIC = b"LFLOWCKP"
VERSION = 1
MODEL_KINDS = {"vae": VaeModel, "flow": FlowModel}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str
    model: VaeModel | FlowModel
    config: dict
    seed: int


def encode_checkpoint(model, seed: int = 0, config: dict | None = None) -> bytes:
    kind = model.kind
    header = json.dumps({"model": model.describe(), "config": config or {}}, sort_keys=True)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    _write_str(buf, kind, "<H")
    _write_str(buf, header, "<I")
    entries = list(model.named_parameters())
    buf.write(struct.pack("<qI", int(seed), len(entries)))
    for name, p in entries:
        _write_str(buf, name, "<H")
        buf.write(struct.pack("<B", p.ndim))
        buf.write(struct.pack(f"<{p.ndim}Q", *p.shape))
        buf.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(model, path, seed: int = 0, config: dict | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(model, seed, config))


def decode_checkpoint(raw: bytes, kind: str | None = None) -> Checkpoint:
    r = _Reader(raw)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a latentflow checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}; expected {VERSION}")
    found = r.string("<H")
    if found not in MODEL_KINDS:
        raise CheckpointError(f"unknown model kind {found!r}")
    if kind is not None and found != kind:
        raise CheckpointError(f"checkpoint holds a {found!r} model, expected {kind!r}")
    try:
        header = json.loads(r.string("<I"))
        model = MODEL_KINDS[found].from_description(header["model"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint header: {exc}") from None
    seed, n = r.unpack("<qI")
    expected = dict(model.named_parameters())
    state = {}
    for _ in range(n):
        name = r.string("<H")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q")
        if name not in expected:
            raise CheckpointError(f"unexpected parameter {name!r} for a {found!r} model")
        if tuple(shape) != expected[name].shape:
            raise CheckpointError(
                f"parameter {name!r}: stored shape {tuple(shape)} does not match "
                f"{expected[name].shape} declared by the {found!r} architecture"
            )
        count = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    if r.remaining():
        raise CheckpointError(f"{r.remaining()} trailing bytes after the last entry")
    missing = sorted(set(expected) - set(state))
    if missing:
        raise CheckpointError(f"checkpoint is missing parameters {missing}")
    model.load_state_dict(state)
    return Checkpoint(found, model, header.get("config", {}), seed)


def load_checkpoint(path, kind: str | None = None) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes(), kind)


def _write_str(buf: io.BytesIO, text: str, fmt: str) -> None:
    data = text.encode("utf-8")
    buf.write(struct.pack(fmt, len(data)))
    buf.write(data)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(
                f"truncated checkpoint: needed {n} bytes at offset {self.pos}, file has {len(self.raw)}"
            )
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self, fmt: str) -> str:
        (n,) = self.unpack(fmt)
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError("corrupt string field in checkpoint") from None

    def remaining(self) -> int:
        return len(self.raw) - self.pos
