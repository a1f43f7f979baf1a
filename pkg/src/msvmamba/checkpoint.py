"""Binary little-endian checkpoints with a CRC32 trailer.

Layout::

    b"MSVM" | u32 version | u64 step
    tensor table (parameters and buffers)
    tensor table (Adam first moments, names prefixed "m:", then "v:")
    f64 lr | f64 beta1 | f64 beta2 | f64 eps | u64 adam_t
    u32 len | RNG state as sorted-key JSON
    u32 len | UTF-8 "key=value" lines (model / train config)
    u32 CRC32 of everything before it

A tensor table is ``u32 count`` followed by entries
``u32 name_len | name | u32 rank | u32 extents[rank] | f32 values``.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, IntegrityError

MAGIC = b"MSVM"
VERSION = 1


@dataclass
class Checkpoint:
    step: int
    tensors: dict[str, np.ndarray]
    opt_tensors: dict[str, np.ndarray] = field(default_factory=dict)
    opt_scalars: tuple[float, float, float, float] = (1e-3, 0.9, 0.999, 1e-8)
    opt_t: int = 0
    rng_state: dict = field(default_factory=dict)
    meta: dict[str, str] = field(default_factory=dict)


def _pack_table(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def encode(ck: Checkpoint) -> bytes:
    meta = "".join(f"{k}={v}\n" for k, v in ck.meta.items()).encode("utf-8")
    rng = json.dumps(ck.rng_state, sort_keys=True).encode("utf-8")
    body = b"".join([
        MAGIC, struct.pack("<IQ", VERSION, ck.step),
        _pack_table(ck.tensors),
        _pack_table(ck.opt_tensors),
        struct.pack("<4dQ", *ck.opt_scalars, ck.opt_t),
        struct.pack("<I", len(rng)), rng,
        struct.pack("<I", len(meta)), meta,
    ])
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes, end: int):
        self.buf, self.pos, self.end = buf, 0, end

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > self.end:
            raise IntegrityError(f"checkpoint truncated reading {what} at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt), what))

    def table(self, what: str) -> dict[str, np.ndarray]:
        (count,) = self.unpack("I", f"{what} count")
        out = {}
        for _ in range(count):
            (n,) = self.unpack("I", f"{what} name length")
            name = self.take(n, f"{what} name").decode("utf-8")
            (rank,) = self.unpack("I", f"rank of {name}")
            if rank > 4:
                raise FormatError(f"tensor {name} has rank {rank} > 4 at byte {self.pos - 4}")
            shape = self.unpack(f"{rank}I", f"extents of {name}")
            size = int(np.prod(shape, dtype=np.int64))
            data = self.take(4 * size, f"values of {name}")
            out[name] = np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32)
        return out


def decode(buf: bytes) -> Checkpoint:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError(f"not a checkpoint: magic {buf[:4]!r} != {MAGIC!r}")
    if len(buf) < 16 + 4:
        raise IntegrityError(f"checkpoint truncated: only {len(buf)} bytes")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
    end = len(buf) - 4
    (stored,) = struct.unpack_from("<I", buf, end)
    if zlib.crc32(buf[:end]) != stored:
        raise IntegrityError("checkpoint CRC32 mismatch (file truncated or corrupted)")
    rd = _Reader(buf, end)
    rd.pos = 8
    (step,) = rd.unpack("Q", "step")
    tensors = rd.table("parameters")
    opt_tensors = rd.table("optimizer state")
    *scalars, opt_t = rd.unpack("4dQ", "optimizer scalars")
    (n,) = rd.unpack("I", "rng length")
    rng_state = json.loads(rd.take(n, "rng state").decode("utf-8"))
    (n,) = rd.unpack("I", "metadata length")
    meta = {}
    for line in rd.take(n, "metadata").decode("utf-8").splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"malformed metadata line {line!r}")
        meta[key] = value
    if rd.pos != end:
        raise FormatError(f"{end - rd.pos} unexpected bytes before the CRC trailer")
    return Checkpoint(step, tensors, opt_tensors, tuple(scalars), opt_t, rng_state, meta)


def save(path, ck: Checkpoint) -> None:
    Path(path).write_bytes(encode(ck))


def load(path) -> Checkpoint:
    return decode(Path(path).read_bytes())


# -- model / trainer bridging ------------------------------------------------

def _rng_to_json(state: dict) -> dict:
    # PCG64 state holds 128-bit ints; JSON keeps them exact as decimal strings
    def conv(v):
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        if isinstance(v, int) and not isinstance(v, bool):
            return str(v)
        return v
    return conv(state)


def _rng_from_json(state: dict) -> dict:
    def conv(v):
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        if isinstance(v, str) and v.lstrip("-").isdigit():
            return int(v)
        return v
    return conv(state)


def from_trainer(trainer, meta: dict[str, str] | None = None) -> Checkpoint:
    model, opt = trainer.model, trainer.opt
    tensors = {k: v for k, v in model.state_dict().items()}
    opt_tensors = {f"m:{k}": v for k, v in opt.m.items()}
    opt_tensors.update({f"v:{k}": v for k, v in opt.v.items()})
    return Checkpoint(trainer.step, tensors, opt_tensors,
                      (float(opt.lr), float(opt.betas[0]), float(opt.betas[1]), float(opt.eps)),
                      opt.t, _rng_to_json(trainer.rng.bit_generator.state), dict(meta or {}))


def restore_trainer(trainer, ck: Checkpoint) -> None:
    trainer.model.load_state_dict(ck.tensors)
    lr, b1, b2, eps = ck.opt_scalars
    trainer.opt.load_state({
        "lr": lr, "betas": (b1, b2), "eps": eps, "t": ck.opt_t,
        "m": {k[2:]: v for k, v in ck.opt_tensors.items() if k.startswith("m:")},
        "v": {k[2:]: v for k, v in ck.opt_tensors.items() if k.startswith("v:")},
    })
    if ck.rng_state:
        trainer.rng.bit_generator.state = _rng_from_json(ck.rng_state)
    trainer.step = ck.step
