"""Binary parameter checkpoints: magic, version, config fingerprint, then named float32 tensors."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MELTCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def save_checkpoint(path, model) -> None:
    """Write every parameter as little-endian float32 with an explicit shape header."""
    parts = [MAGIC, struct.pack("<I", VERSION), _pack_str(model.cfg.fingerprint()), struct.pack("<I", len(model.params))]
    for name, p in model.params.items():
        data = np.asarray(p.data, dtype="<f4")
        if not np.array_equal(data.astype(np.float64), p.data):
            raise CheckpointError(f"{name} holds values that float32 cannot represent")
        parts.append(_pack_str(name))
        parts.append(struct.pack("<B", data.ndim))
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(data.tobytes(order="C"))
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("truncated checkpoint")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")


def read_checkpoint(path) -> tuple[str, dict[str, np.ndarray]]:
    """Fingerprint and tensors of a checkpoint file; raises :class:`CheckpointError` on any defect."""
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    fingerprint = r.string()
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.string()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape)
        tensors[name] = data.astype(np.float64)
    if r.pos != len(r.blob):
        raise CheckpointError(f"{len(r.blob) - r.pos} trailing bytes after the last tensor")
    return fingerprint, tensors


def load_checkpoint(path, model):
    """Load parameters into ``model`` after validating the whole file; returns ``model``."""
    fingerprint, tensors = read_checkpoint(path)
    expected = model.cfg.fingerprint()
    if fingerprint != expected:
        raise CheckpointError(f"config fingerprint mismatch: checkpoint {fingerprint}, model {expected}")
    try:
        model.load_state(tensors)
    except ValueError as e:
        raise CheckpointError(str(e)) from e
    return model
