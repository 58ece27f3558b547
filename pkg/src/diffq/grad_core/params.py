"""Flat parameter vectors with a named segment table, plus the QCW1 container."""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from ..errors import SegmentMismatchError, ShapeMismatchError

MAGIC = b"QCW1"
VERSION = 1


@dataclass(frozen=True)
class Segment:
    layer_id: str
    offset: int
    length: int
    shape: tuple


class ParamLayout:
    """Ordered, non-overlapping segment table covering ``size`` floats."""

    def __init__(self, segments: Iterable[Segment]):
        self.segments = tuple(segments)
        offset = 0
        for seg in self.segments:
            if seg.offset != offset or seg.length != int(np.prod(seg.shape, dtype=np.int64)):
                raise ValueError(f"segment {seg.layer_id!r} breaks the contiguous layout")
            offset += seg.length
        self.size = offset
        self._index = {s.layer_id: s for s in self.segments}
        if len(self._index) != len(self.segments):
            raise ValueError("duplicate layer id in segment table")

    @classmethod
    def from_shapes(cls, shapes: Mapping[str, tuple]) -> "ParamLayout":
        segs, off = [], 0
        for name, shape in shapes.items():
            shape = tuple(int(n) for n in shape)
            n = int(np.prod(shape, dtype=np.int64))
            segs.append(Segment(name, off, n, shape))
            off += n
        return cls(segs)

    def table(self):
        return [(s.layer_id, s.offset, s.length) for s in self.segments]

    def __getitem__(self, layer_id) -> Segment:
        return self._index[layer_id]

    def __contains__(self, layer_id):
        return layer_id in self._index

    def names(self):
        return [s.layer_id for s in self.segments]

    def __eq__(self, other):
        return isinstance(other, ParamLayout) and self.table() == other.table()

    def __hash__(self):
        return hash(tuple(self.table()))


class ParamVector:
    """Parameters or gradients of a model as one contiguous float64 array."""

    __slots__ = ("layout", "data")

    def __init__(self, layout: ParamLayout, data=None):
        self.layout = layout
        if data is None:
            data = np.zeros(layout.size)
        data = np.ascontiguousarray(data, dtype=np.float64)
        if data.shape != (layout.size,):
            raise ShapeMismatchError("<ParamVector>", (layout.size,), data.shape)
        self.data = data

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "ParamVector":
        layout = ParamLayout.from_shapes({k: np.shape(v) for k, v in arrays.items()})
        data = np.concatenate([np.asarray(v, dtype=np.float64).ravel() for v in arrays.values()]) \
            if arrays else np.zeros(0)
        return cls(layout, data)

    @classmethod
    def pack(cls, layout: ParamLayout, arrays: Mapping[str, np.ndarray]) -> "ParamVector":
        out = np.empty(layout.size)
        for seg in layout.segments:
            arr = np.asarray(arrays[seg.layer_id], dtype=np.float64)
            if arr.shape != seg.shape:
                raise ShapeMismatchError(seg.layer_id, seg.shape, arr.shape)
            out[seg.offset:seg.offset + seg.length] = arr.ravel()
        return cls(layout, out)

    def view(self, layer_id) -> np.ndarray:
        seg = self.layout[layer_id]
        return self.data[seg.offset:seg.offset + seg.length].reshape(seg.shape)

    def arrays(self) -> dict[str, np.ndarray]:
        return {s.layer_id: self.view(s.layer_id) for s in self.layout.segments}

    def copy(self) -> "ParamVector":
        return ParamVector(self.layout, self.data.copy())

    def _check(self, other):
        if not isinstance(other, ParamVector) or other.layout != self.layout:
            raise SegmentMismatchError("ParamVectors have different segment tables")

    def __add__(self, other):
        self._check(other)
        return ParamVector(self.layout, self.data + other.data)

    def __sub__(self, other):
        self._check(other)
        return ParamVector(self.layout, self.data - other.data)

    def __mul__(self, c: float):
        return ParamVector(self.layout, self.data * float(c))

    __rmul__ = __mul__

    def norm(self) -> float:
        return math.sqrt(dot(self, self))

    def __repr__(self):
        return f"ParamVector(size={self.layout.size}, segments={self.layout.names()})"


def two_product(a, b):
    """Error-free product: a*b == p + e exactly (Dekker/Veltkamp split).

    Exact as long as neither the product nor its error underflows, which
    holds for |a*b| above roughly 1e-290.
    """
    p = a * b
    split = 134217729.0  # 2**27 + 1

    def halves(x):
        c = split * x
        hi = c - (c - x)
        return hi, x - hi

    ah, al = halves(a)
    bh, bl = halves(b)
    e = ((ah * bh - p) + ah * bl + al * bh) + al * bl
    return p, e


def dot(a: ParamVector, b: ParamVector) -> float:
    """Correctly rounded inner product of two ParamVectors.

    Products are split error-free and summed with ``math.fsum``; the result
    is independent of summation order and reproducible across runs.
    """
    a._check(b)
    p, e = two_product(a.data, b.data)
    return math.fsum(np.concatenate([p, e]).tolist())


# ---------------------------------------------------------------------------
# QCW1 container
#
#   magic    4 bytes  b"QCW1"
#   version  uint32
#   nseg     uint32
#   nseg x { id_len uint16, id utf-8, offset uint64, length uint64 }
#   data     float64[sum(length)], little endian
# ---------------------------------------------------------------------------

def dumps(pv: ParamVector) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(pv.layout.segments)))
    for layer_id, offset, length in pv.layout.table():
        raw = layer_id.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<QQ", offset, length))
    buf.write(pv.data.astype("<f8").tobytes())
    return buf.getvalue()


def loads(blob: bytes, like: ParamLayout | None = None) -> ParamVector:
    """Decode a QCW1 blob. Segment shapes come from ``like`` when given,
    otherwise segments are one-dimensional."""
    if blob[:4] != MAGIC:
        raise ValueError("not a QCW1 container")
    version, nseg = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ValueError(f"unsupported QCW1 version {version}")
    pos = 12
    table = []
    for _ in range(nseg):
        (n,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        layer_id = blob[pos:pos + n].decode("utf-8")
        pos += n
        offset, length = struct.unpack_from("<QQ", blob, pos)
        pos += 16
        table.append((layer_id, offset, length))
    total = sum(t[2] for t in table)
    data = np.frombuffer(blob, dtype="<f8", count=total, offset=pos).astype(np.float64)
    if like is not None:
        if like.table() != table:
            raise SegmentMismatchError("checkpoint segment table does not match the model")
        layout = like
    else:
        layout = ParamLayout(Segment(i, o, n, (n,)) for i, o, n in table)
    return ParamVector(layout, data)


def save(pv: ParamVector, path) -> None:
    Path(path).write_bytes(dumps(pv))


def load(path, like: ParamLayout | None = None) -> ParamVector:
    return loads(Path(path).read_bytes(), like)
