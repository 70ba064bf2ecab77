"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"VPAD"  u32 version
    u32 n    JSON metadata (run config, step, optimizer settings, RNG state)
    u32 k    k array records:
             u16 name length, name (utf-8), u8 dtype tag, u8 ndim,
             ndim x u64 dims, raw little-endian payload
    u32      CRC-32 of every preceding byte

Files are written to a temporary sibling and renamed into place.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ._fileio import atomic_write as _atomic_write

MAGIC = b"VPAD"
VERSION = 1

_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("u1"): 3, np.dtype("<i8"): 4}
_FROM_TAG = {v: k for k, v in _TAGS.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    meta: dict
    arrays: dict = field(default_factory=dict)

    def group(self, prefix: str) -> dict:
        """Arrays under ``prefix/`` with the prefix stripped."""
        p = prefix + "/"
        return {k[len(p):]: v for k, v in self.arrays.items() if k.startswith(p)}


def encode(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(meta)), meta,
             struct.pack("<I", len(ckpt.arrays))]
    for name, arr in ckpt.arrays.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dt not in _TAGS:
            raise CheckpointError(f"array {name!r}: unsupported dtype {arr.dtype}")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<BB", _TAGS[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.require(arr, dtype=dt, requirements="C").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes) -> Checkpoint:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise CheckpointError(f"not a checkpoint: bad magic {bytes(buf[:4])!r}")
    r = _Reader(buf)
    r.take(4, "magic")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (expected {VERSION})")
    if len(buf) < 12:
        raise CheckpointError("truncated checkpoint")
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != crc:
        raise CheckpointError("checkpoint is truncated or corrupt (CRC mismatch)")
    r.buf = buf[:-4]
    (n,) = r.unpack("<I", "metadata length")
    meta = json.loads(r.take(n, "metadata").decode())
    (k,) = r.unpack("<I", "array count")
    arrays = {}
    for _ in range(k):
        (ln,) = r.unpack("<H", "name length")
        name = r.take(ln, "name").decode()
        tag, ndim = r.unpack("<BB", f"header of {name!r}")
        if tag not in _FROM_TAG:
            raise CheckpointError(f"array {name!r}: unknown dtype tag {tag}")
        shape = r.unpack(f"<{ndim}Q", f"shape of {name!r}")
        dt = _FROM_TAG[tag]
        nbytes = dt.itemsize * int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(r.take(nbytes, f"payload of {name!r}"), dtype=dt).reshape(shape).copy()
    if r.pos != len(r.buf):
        raise CheckpointError(f"{len(r.buf) - r.pos} unexpected bytes after the array table")
    return Checkpoint(meta, arrays)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    _atomic_write(Path(path), encode(ckpt))


def load_checkpoint(path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode(buf)


# --------------------------------------------------------------------------
# model / trainer <-> checkpoint
# --------------------------------------------------------------------------


def _put_model(arrays: dict, prefix: str, model) -> None:
    for name, t in model.named_parameters():
        arrays[f"{prefix}/{name}"] = t.data
    for name, buf in model.named_buffers():
        if buf is not None:
            arrays[f"{prefix}.buffers/{name}"] = buf


def load_model_arrays(ckpt: Checkpoint, prefix: str, model) -> None:
    """Copy parameters and buffers into ``model``; the name sets must match exactly."""
    got = ckpt.group(prefix)
    want = dict(model.named_parameters())
    if set(got) != set(want):
        missing = sorted(set(want) - set(got))
        extra = sorted(set(got) - set(want))
        raise CheckpointError(f"{prefix}: parameter names differ from the configured model "
                              f"(missing {missing}, unexpected {extra})")
    for name, t in want.items():
        arr = got[name]
        if arr.shape != t.shape or arr.dtype != t.dtype:
            raise CheckpointError(f"{prefix}/{name}: stored {arr.dtype}{arr.shape}, "
                                  f"model has {t.dtype}{t.shape}")
        t.data[...] = arr
    bufs = ckpt.group(prefix + ".buffers")
    for name, _ in model.named_buffers():
        if name in bufs:
            model.set_buffer(name, bufs[name])


def capture(trainer, run_config: dict, extra: Optional[dict] = None) -> Checkpoint:
    """Everything needed to continue ``trainer`` exactly where it is."""
    arrays: dict = {}
    _put_model(arrays, "model", trainer.model)
    meta = {
        "config": run_config,
        "step": trainer.step,
        "rng": trainer.rng_state(),
        "optimizer": {"model": trainer.gen_opt.state_meta()},
        "num_parameters": trainer.model.num_parameters(),
    }
    for k, v in trainer.gen_opt.state_arrays().items():
        arrays[f"opt.model/{k}"] = v
    if trainer.inst is not None:
        _put_model(arrays, "instructor", trainer.inst)
        meta["optimizer"]["instructor"] = trainer.inst_opt.state_meta()
        for k, v in trainer.inst_opt.state_arrays().items():
            arrays[f"opt.instructor/{k}"] = v
    if extra:
        meta.update(extra)
    return Checkpoint(meta, arrays)


def restore(trainer, ckpt: Checkpoint) -> None:
    """Inverse of :func:`capture` on a trainer built from the same config."""
    n = ckpt.meta.get("num_parameters")
    if n is not None and n != trainer.model.num_parameters():
        raise CheckpointError(f"checkpoint holds {n} parameters, configured model has "
                              f"{trainer.model.num_parameters()}")
    load_model_arrays(ckpt, "model", trainer.model)
    trainer.gen_opt.load_state(ckpt.meta["optimizer"]["model"], ckpt.group("opt.model"))
    has_inst = "instructor" in ckpt.meta["optimizer"]
    if has_inst != (trainer.inst is not None):
        raise CheckpointError("checkpoint and configuration disagree about the instructor")
    if trainer.inst is not None:
        load_model_arrays(ckpt, "instructor", trainer.inst)
        trainer.inst_opt.load_state(ckpt.meta["optimizer"]["instructor"], ckpt.group("opt.instructor"))
    trainer.step = int(ckpt.meta["step"])
    trainer.set_rng_state(ckpt.meta["rng"])
