"""Binary checkpoint format.

Layout (little-endian)::

    b"AAFK" | version u32 | section count u32
    per section: tag 4 bytes | payload length u64 | payload | crc32(payload) u32

Sections: CONF (JSON text), TENS (tensor table), OPTM (Adam step + moment
tables), RNGS (JSON bit-generator state), META (JSON step/epoch). A tensor
table is ``count u32`` then per tensor ``name_len u32 | name | ndim u32 |
dims u64... | float64 values``.
"""
from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"AAFK"
VERSION = 1
SECTION_ORDER = (b"CONF", b"TENS", b"OPTM", b"RNGS", b"META")


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointIntegrityError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray]
    optimizer: dict = field(default_factory=lambda: {"t": 0, "m": {}, "v": {}})
    rng_state: dict = field(default_factory=dict)
    step: int = 0
    epoch: float = 0.0
    version: int = VERSION


def _pack_table(tensors: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointIntegrityError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _unpack_table(payload: bytes) -> dict[str, np.ndarray]:
    r = _Reader(payload)
    (count,) = r.unpack("<I")
    out = {}
    for _ in range(count):
        (n,) = r.unpack("<I")
        name = r.take(n).decode("utf-8")
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(payload):
        raise CheckpointIntegrityError("trailing bytes in tensor table")
    return out


def encode(ck: Checkpoint) -> bytes:
    opt_tables = {f"m/{k}": v for k, v in ck.optimizer["m"].items()}
    opt_tables.update({f"v/{k}": v for k, v in ck.optimizer["v"].items()})
    sections = {
        b"CONF": json.dumps(ck.config, sort_keys=True).encode("utf-8"),
        b"TENS": _pack_table(ck.tensors),
        b"OPTM": struct.pack("<Q", int(ck.optimizer["t"])) + _pack_table(opt_tables),
        b"RNGS": json.dumps(ck.rng_state, sort_keys=True).encode("utf-8"),
        b"META": json.dumps({"step": ck.step, "epoch": ck.epoch}).encode("utf-8"),
    }
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", ck.version, len(sections)))
    for tag in SECTION_ORDER:
        payload = sections[tag]
        buf.write(tag)
        buf.write(struct.pack("<Q", len(payload)))
        buf.write(payload)
        buf.write(struct.pack("<I", zlib.crc32(payload)))
    return buf.getvalue()


def decode(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointIntegrityError("bad magic bytes; not a checkpoint")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version} is not supported (expected {VERSION})")
    sections = {}
    for _ in range(count):
        tag = r.take(4)
        (length,) = r.unpack("<Q")
        payload = r.take(length)
        (crc,) = r.unpack("<I")
        if zlib.crc32(payload) != crc:
            raise CheckpointIntegrityError(f"checksum mismatch in section {tag!r}")
        sections[tag] = payload
    if r.pos != len(data):
        raise CheckpointIntegrityError("trailing bytes after last section")
    missing = [t for t in SECTION_ORDER if t not in sections]
    if missing:
        raise CheckpointIntegrityError(f"missing sections {missing}")
    try:
        opt = _Reader(sections[b"OPTM"])
        (t,) = opt.unpack("<Q")
        table = _unpack_table(sections[b"OPTM"][opt.pos:])
        meta = json.loads(sections[b"META"])
        return Checkpoint(
            config=json.loads(sections[b"CONF"]),
            tensors=_unpack_table(sections[b"TENS"]),
            optimizer={
                "t": t,
                "m": {k[2:]: v for k, v in table.items() if k.startswith("m/")},
                "v": {k[2:]: v for k, v in table.items() if k.startswith("v/")},
            },
            rng_state=json.loads(sections[b"RNGS"]),
            step=int(meta["step"]),
            epoch=float(meta["epoch"]),
            version=version,
        )
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError) as exc:
        raise CheckpointIntegrityError(f"malformed section: {exc}") from exc


def save_checkpoint(ck: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(ck))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes())
