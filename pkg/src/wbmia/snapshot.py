"""
Model snapshots and their binary file format.

Layout (all integers little-endian), documented in ``docs/formats.md``::

    magic        4 bytes   b"WBMS"
    version      uint32    FORMAT_VERSION
    epoch        int64
    meta_len     uint32
    meta         meta_len bytes of UTF-8 JSON (architecture descriptor + extras)
    n_tensors    uint32
    per tensor:
        ndim     uint32
        dims     ndim x uint64
        data     prod(dims) x float64 (little-endian, row-major)
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from wbmia.errors import DimensionError, FormatError
from wbmia.nn import LayerSpec, Network, param_shapes

MAGIC = b"WBMS"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelSnapshot:
    """Immutable copy of a network's parameters at one epoch."""

    epoch: int
    params: tuple
    arch: tuple
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = param_shapes(self.arch)
        if len(shapes) != len(self.params) or any(
                tuple(p.shape) != s for p, s in zip(self.params, shapes)):
            raise DimensionError("snapshot params do not match architecture")

    @classmethod
    def of(cls, net: Network, epoch: int, **meta) -> "ModelSnapshot":
        params = []
        for p in net.params:
            c = np.array(p, dtype=np.float64, copy=True)
            c.setflags(write=False)
            params.append(c)
        return cls(int(epoch), tuple(params), tuple(net.layers), dict(meta))

    def network(self) -> Network:
        """A fresh, writable network initialised from this snapshot."""
        return Network(list(self.arch), [p.copy() for p in self.params])

    def same_arch(self, other: "ModelSnapshot") -> bool:
        return self.arch == other.arch


def save_tensors(path, tensors, epoch: int = 0, meta: dict | None = None) -> Path:
    path = Path(path)
    blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Iq", FORMAT_VERSION, int(epoch)))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for t in tensors:
            t = np.asarray(t, dtype="<f8")
            fh.write(struct.pack("<I", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}Q", *t.shape))
            fh.write(np.ascontiguousarray(t).tobytes())
    return path


def load_tensors(path) -> tuple[list, int, dict]:
    """Inverse of :func:`save_tensors`: ``(tensors, epoch, meta)``."""
    raw = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError(f"{path}: truncated file")
        out = raw[pos:pos + n]
        pos += n
        return out

    if take(4) != MAGIC:
        raise FormatError(f"{path}: not a snapshot file")
    version, epoch = struct.unpack("<Iq", take(12))
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    (meta_len,) = struct.unpack("<I", take(4))
    meta = json.loads(take(meta_len).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    tensors = []
    for _ in range(count):
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        t = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        tensors.append(t)
    if pos != len(raw):
        raise FormatError(f"{path}: trailing bytes")
    return tensors, epoch, meta


def save_snapshot(snap: ModelSnapshot, path) -> Path:
    meta = dict(snap.meta)
    meta["arch"] = [s.to_dict() for s in snap.arch]
    return save_tensors(path, snap.params, snap.epoch, meta)


def load_snapshot(path) -> ModelSnapshot:
    tensors, epoch, meta = load_tensors(path)
    if "arch" not in meta:
        raise FormatError(f"{path}: missing architecture descriptor")
    arch = tuple(LayerSpec.from_dict(d) for d in meta.pop("arch"))
    for t in tensors:
        t.setflags(write=False)
    return ModelSnapshot(epoch, tuple(tensors), arch, meta)
