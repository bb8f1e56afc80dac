"""Flat little-endian checkpoint files.

Layout::

    header   "SYMC", version, h_dim, n_out, action_dim, obs_dim, variant id
    arrays   count, then per array: name length, name, ndim, shape, float64 values
             (online and target parameters first, then optimizer moments)
    scalars  count, then per scalar: name length, name, float64 value
    config   byte length, UTF-8 ``key = value`` text of the run configuration

Values are always stored as float64, so a float32 network round-trips exactly.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SYMC"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIII")
_U32 = struct.Struct("<I")
_U16 = struct.Struct("<H")
_F64 = struct.Struct("<d")

OPT_SCALARS = ("lr", "beta1", "beta2", "weight_decay", "eps", "sqrt_divisor", "steps", "rejected")
STATE_SCALARS = ("q_ema", "alpha", "r_norm", "gamma", "tau", "updates_per_step", "step", "episode",
                 "updates", "nonfinite_skips", "backward_passes")
INT_SCALARS = {"steps", "rejected", "updates_per_step", "step", "episode", "updates",
               "nonfinite_skips", "backward_passes"}


class CheckpointError(ValueError):
    pass


@dataclass
class Header:
    h_dim: int
    n_out: int
    action_dim: int
    obs_dim: int
    variant_id: int
    version: int = VERSION


@dataclass
class Checkpoint:
    header: Header
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    scalars: dict[str, float] = field(default_factory=dict)
    config_text: str = ""

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        """Arrays under ``prefix/`` with the prefix removed."""
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.arrays.items() if k.startswith(prefix + "/")}


def _name(buf: bytearray, name: str) -> None:
    raw = name.encode()
    buf += _U16.pack(len(raw))
    buf += raw


def encode(ck: Checkpoint) -> bytes:
    h = ck.header
    buf = bytearray(_HEADER.pack(MAGIC, h.version, h.h_dim, h.n_out, h.action_dim, h.obs_dim,
                                 h.variant_id))
    buf += _U32.pack(len(ck.arrays))
    for name, arr in ck.arrays.items():
        arr = np.asarray(arr)
        _name(buf, name)
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    buf += _U32.pack(len(ck.scalars))
    for name, value in ck.scalars.items():
        _name(buf, name)
        buf += _F64.pack(float(value))
    text = ck.config_text.encode()
    buf += _U32.pack(len(text))
    buf += text
    return bytes(buf)


class _Reader:
    def __init__(self, raw: bytes, where: str):
        self.raw, self.off, self.where = raw, 0, where

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.raw):
            raise CheckpointError(f"{self.where}: truncated checkpoint")
        out = self.raw[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, st: struct.Struct):
        return st.unpack(self.take(st.size))

    def name(self) -> str:
        (n,) = self.unpack(_U16)
        return self.take(n).decode()


def decode(raw: bytes, where: str = "<bytes>") -> Checkpoint:
    r = _Reader(raw, where)
    magic, version, h_dim, n_out, action_dim, obs_dim, variant_id = r.unpack(_HEADER)
    if magic != MAGIC:
        raise CheckpointError(f"{where}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointError(f"{where}: unsupported checkpoint version {version}")
    ck = Checkpoint(Header(h_dim, n_out, action_dim, obs_dim, variant_id, version))
    (count,) = r.unpack(_U32)
    for _ in range(count):
        name = r.name()
        (ndim,) = struct.unpack("<B", r.take(1))
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        ck.arrays[name] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    (count,) = r.unpack(_U32)
    for _ in range(count):
        name = r.name()
        (ck.scalars[name],) = r.unpack(_F64)
    (n,) = r.unpack(_U32)
    ck.config_text = r.take(n).decode()
    if r.off != len(raw):
        raise CheckpointError(f"{where}: trailing bytes in checkpoint")
    return ck


def save(path: str | Path, ck: Checkpoint) -> None:
    Path(path).write_bytes(encode(ck))


def load(path: str | Path) -> Checkpoint:
    return decode(Path(path).read_bytes(), str(path))


# --------------------------------------------------------------------------
# Trainer-level helpers
# --------------------------------------------------------------------------

def from_trainer(trainer, variant_id: int, config_text: str = "") -> Checkpoint:
    net, opt, st = trainer.net, trainer.opt, trainer.state
    ck = Checkpoint(Header(net.h_dim, net.n_out, net.action_dim, net.obs_dim, variant_id),
                    config_text=config_text)
    ck.arrays.update(net.all_params())
    for k in net.online_params():
        ck.arrays[f"opt/m/{k}"] = opt.m[k]
        ck.arrays[f"opt/v/{k}"] = opt.v[k]
    for k in OPT_SCALARS:
        ck.scalars[f"opt/{k}"] = float(getattr(opt, k))
    for k in STATE_SCALARS:
        v = getattr(st, k)
        ck.scalars[f"state/{k}"] = math.nan if v is None else float(v)
    return ck


def restore_net(net, ck: Checkpoint) -> None:
    """Copy parameters into ``net`` (cast to its dtype), checking names and shapes."""
    for name, target in net.all_params().items():
        if name not in ck.arrays:
            raise CheckpointError(f"checkpoint has no array {name!r}")
        src = ck.arrays[name]
        if src.shape != target.shape:
            raise CheckpointError(f"{name}: shape {src.shape} does not match network {target.shape}")
        target[...] = src


def restore_trainer(trainer, ck: Checkpoint) -> None:
    restore_net(trainer.net, ck)
    opt, st = trainer.opt, trainer.state
    for k in trainer.net.online_params():
        opt.m[k][...] = ck.arrays[f"opt/m/{k}"]
        opt.v[k][...] = ck.arrays[f"opt/v/{k}"]
    for k in OPT_SCALARS:
        v = ck.scalars[f"opt/{k}"]
        setattr(opt, k, bool(v) if k == "sqrt_divisor" else int(v) if k in INT_SCALARS else v)
    for k in STATE_SCALARS:
        v = ck.scalars[f"state/{k}"]
        if k == "q_ema" and math.isnan(v):
            v = None
        elif k in INT_SCALARS:
            v = int(v)
        setattr(st, k, v)
