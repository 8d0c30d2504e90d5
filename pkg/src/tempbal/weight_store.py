"""Binary snapshot format for per-layer network weights.

A snapshot stores the weight tensors of a model at one training instant so
that spectral analysis can run without any training-framework dependency.

File layout (".wsnp", all integers little-endian):

    magic      4 bytes  "WSNP" (57 53 4E 50)
    version    u32      currently 1
    epoch      u32
    layer_cnt  u32
    per layer:
        name_len   u32
        name       UTF-8 bytes
        ndims      u32      2 (dense) or 4 (conv, out/in/kh/kw order)
        dims       u64 each
        values     product(dims) f64, row-major

Values are 64-bit IEEE-754 so a write/read cycle is bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np

from .errors import DataError

MAGIC = b"WSNP"
VERSION = 1


class SnapshotError(DataError):
    """Base class for snapshot format errors."""


class SnapshotMagicError(SnapshotError):
    """Stream does not start with the WSNP magic bytes."""


class SnapshotTruncatedError(SnapshotError):
    """Stream ended before the declared payload was complete."""


class SnapshotStructureError(SnapshotError):
    """Structurally invalid snapshot: bad dims, counts, or layer names."""


class SnapshotIOError(SnapshotError):
    """Underlying sink/source failure; carries the byte offset reached."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class LayerTensor:
    """One named weight tensor: 2-D dense or 4-D conv (out, in, kh, kw)."""

    name: str
    dims: tuple[int, ...]
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        if not self.name:
            raise SnapshotStructureError("layer name must be nonempty")
        if len(self.dims) not in (2, 4):
            raise SnapshotStructureError(
                f"layer {self.name!r}: dims must have length 2 or 4, got {len(self.dims)}"
            )
        if any(d <= 0 for d in self.dims):
            raise SnapshotStructureError(f"layer {self.name!r}: dims must be positive, got {self.dims}")
        vals = np.asarray(self.values, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        expected = int(np.prod(self.dims))
        if vals.size != expected:
            raise SnapshotStructureError(
                f"layer {self.name!r}: dims {self.dims} imply {expected} values, got {vals.size}"
            )

    def __eq__(self, other) -> bool:
        if not isinstance(other, LayerTensor):
            return NotImplemented
        return (
            self.name == other.name
            and self.dims == other.dims
            and self.values.tobytes() == other.values.tobytes()
        )

    def __hash__(self):
        return hash((self.name, self.dims))

    def as_array(self) -> np.ndarray:
        """Values reshaped to self.dims (row-major)."""
        return self.values.reshape(self.dims)


@dataclass(frozen=True)
class WeightSnapshot:
    """Ordered collection of layer tensors at one epoch."""

    epoch: int
    layers: tuple[LayerTensor, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.epoch < 0:
            raise SnapshotStructureError(f"epoch must be nonnegative, got {self.epoch}")
        if not self.layers:
            raise SnapshotStructureError("snapshot must contain at least one layer")
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise SnapshotStructureError("layer names must be unique within a snapshot")

    def layer_names(self) -> list[str]:
        return [layer.name for layer in self.layers]


def write_snapshot(snapshot: WeightSnapshot, dest: BinaryIO) -> int:
    """Serialize a snapshot to a byte sink. Returns the number of bytes written.

    Writing is a pure function of the snapshot: the same snapshot always
    produces the same bytes.
    """
    chunks = [MAGIC, struct.pack("<III", VERSION, snapshot.epoch, len(snapshot.layers))]
    for layer in snapshot.layers:
        name_bytes = layer.name.encode("utf-8")
        chunks.append(struct.pack("<I", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack("<I", len(layer.dims)))
        chunks.append(struct.pack(f"<{len(layer.dims)}Q", *layer.dims))
        chunks.append(layer.values.astype("<f8", copy=False).tobytes())
    written = 0
    for chunk in chunks:
        try:
            dest.write(chunk)
        except OSError as exc:
            raise SnapshotIOError(f"write failed: {exc}", written) from exc
        written += len(chunk)
    return written


class _Reader:
    """Tracks the byte offset so truncation errors can name it."""

    def __init__(self, source: BinaryIO):
        self.source = source
        self.offset = 0

    def read(self, count: int, context: str) -> bytes:
        try:
            data = self.source.read(count)
        except OSError as exc:
            raise SnapshotIOError(f"read failed: {exc}", self.offset) from exc
        if data is None or len(data) < count:
            raise SnapshotTruncatedError(
                f"truncated {context}: wanted {count} bytes at offset {self.offset}, "
                f"got {0 if data is None else len(data)}"
            )
        self.offset += count
        return data

    def u32(self, context: str) -> int:
        return struct.unpack("<I", self.read(4, context))[0]


def read_snapshot(source: BinaryIO) -> WeightSnapshot:
    """Parse a snapshot stream written by write_snapshot (its exact inverse)."""
    r = _Reader(source)
    magic = r.read(4, "reading magic")
    if magic != MAGIC:
        raise SnapshotMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version = r.u32("reading version")
    if version != VERSION:
        raise SnapshotStructureError(f"unsupported version {version}")
    epoch = r.u32("reading epoch")
    layer_count = r.u32("reading layer count")
    if layer_count == 0:
        raise SnapshotStructureError("snapshot declares zero layers")

    layers = []
    for idx in range(layer_count):
        ctx = f"at layer {idx}"
        name_len = r.u32(ctx)
        raw_name = r.read(name_len, ctx)
        try:
            name = raw_name.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise SnapshotStructureError(f"layer {idx}: name is not valid UTF-8") from exc
        ndims = r.u32(ctx)
        if ndims not in (2, 4):
            raise SnapshotStructureError(f"layer {idx} ({name!r}): ndims must be 2 or 4, got {ndims}")
        dims = struct.unpack(f"<{ndims}Q", r.read(8 * ndims, ctx))
        if any(d == 0 for d in dims):
            raise SnapshotStructureError(f"layer {idx} ({name!r}): zero dimension in {dims}")
        count = int(np.prod(dims))
        values = np.frombuffer(r.read(8 * count, ctx), dtype="<f8").astype(np.float64)
        try:
            layers.append(LayerTensor(name=name, dims=tuple(int(d) for d in dims), values=values))
        except SnapshotStructureError as exc:
            raise SnapshotStructureError(f"layer {idx}: {exc}") from exc

    try:
        return WeightSnapshot(epoch=epoch, layers=tuple(layers))
    except SnapshotStructureError as exc:
        raise SnapshotStructureError(str(exc)) from exc


def save_snapshot(snapshot: WeightSnapshot, path: str) -> int:
    try:
        with open(path, "wb") as fh:
            return write_snapshot(snapshot, fh)
    except OSError as exc:
        raise SnapshotIOError(f"cannot write {path!r}: {exc}", 0) from exc


def load_snapshot(path: str) -> WeightSnapshot:
    try:
        with open(path, "rb") as fh:
            return read_snapshot(fh)
    except OSError as exc:
        raise SnapshotIOError(f"cannot read {path!r}: {exc}", 0) from exc
