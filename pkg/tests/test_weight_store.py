import io
import struct

import numpy as np
import pytest

from conftest import random_snapshot
from tempbal.weight_store import (
    MAGIC,
    LayerTensor,
    SnapshotMagicError,
    SnapshotStructureError,
    SnapshotTruncatedError,
    WeightSnapshot,
    read_snapshot,
    write_snapshot,
)


def roundtrip(snapshot: WeightSnapshot) -> WeightSnapshot:
    buf = io.BytesIO()
    write_snapshot(snapshot, buf)
    buf.seek(0)
    return read_snapshot(buf)


def snapshot_bytes(snapshot: WeightSnapshot) -> bytes:
    buf = io.BytesIO()
    write_snapshot(snapshot, buf)
    return buf.getvalue()


def test_zero_tensor_roundtrip():
    snap = WeightSnapshot(epoch=0, layers=(LayerTensor("fc", (2, 3), np.zeros(6)),))
    raw = snapshot_bytes(snap)
    # header: magic + version/epoch/count, then name, ndims, dims, 6 zero f64
    assert raw[:4] == MAGIC
    assert raw[-48:] == b"\x00" * 48
    assert roundtrip(snap) == snap


def test_two_layer_roundtrip():
    rng = np.random.default_rng(0)
    snap = WeightSnapshot(
        epoch=17,
        layers=(
            LayerTensor("conv", (4, 2, 3, 3), rng.normal(size=72)),
            LayerTensor("fc", (10, 72), rng.normal(size=720)),
        ),
    )
    back = roundtrip(snap)
    assert back == snap
    assert back.epoch == 17
    assert back.layer_names() == ["conv", "fc"]


def test_randomized_roundtrip_identity():
    rng = np.random.default_rng(42)
    for _ in range(300):
        snap = random_snapshot(rng)
        assert roundtrip(snap) == snap


def test_write_is_deterministic():
    rng = np.random.default_rng(7)
    snap = random_snapshot(rng)
    assert snapshot_bytes(snap) == snapshot_bytes(snap)


def test_roundtrip_preserves_bits_exactly():
    # values that stress the f64 encoding, including signed zero and denormals
    values = np.array([0.0, -0.0, 5e-324, -5e-324, 1e308, -1e308, 1 + 2**-52, np.pi])
    snap = WeightSnapshot(epoch=1, layers=(LayerTensor("bits", (2, 4), values),))
    back = roundtrip(snap)
    assert back.layers[0].values.tobytes() == values.tobytes()


def test_bad_magic():
    with pytest.raises(SnapshotMagicError):
        read_snapshot(io.BytesIO(b"NOPE" + b"\x00" * 64))


def test_truncated_mid_values_names_layer():
    rng = np.random.default_rng(1)
    snap = WeightSnapshot(
        epoch=0,
        layers=(
            LayerTensor("a", (2, 2), rng.normal(size=4)),
            LayerTensor("b", (3, 3), rng.normal(size=9)),
        ),
    )
    raw = snapshot_bytes(snap)
    with pytest.raises(SnapshotTruncatedError, match="layer 1"):
        read_snapshot(io.BytesIO(raw[:-20]))


def test_truncated_header():
    with pytest.raises(SnapshotTruncatedError):
        read_snapshot(io.BytesIO(MAGIC + struct.pack("<I", 1)))


def test_zero_layer_count_rejected():
    raw = MAGIC + struct.pack("<III", 1, 0, 0)
    with pytest.raises(SnapshotStructureError):
        read_snapshot(io.BytesIO(raw))


def test_bad_ndims_rejected():
    raw = MAGIC + struct.pack("<III", 1, 0, 1)
    raw += struct.pack("<I", 1) + b"x" + struct.pack("<I", 3)
    raw += struct.pack("<3Q", 2, 2, 2) + b"\x00" * 64
    with pytest.raises(SnapshotStructureError, match="ndims"):
        read_snapshot(io.BytesIO(raw))


def test_zero_dimension_rejected():
    raw = MAGIC + struct.pack("<III", 1, 0, 1)
    raw += struct.pack("<I", 1) + b"x" + struct.pack("<I", 2)
    raw += struct.pack("<2Q", 0, 4)
    with pytest.raises(SnapshotStructureError, match="zero dimension"):
        read_snapshot(io.BytesIO(raw))


def test_non_utf8_name_rejected():
    raw = MAGIC + struct.pack("<III", 1, 0, 1)
    raw += struct.pack("<I", 2) + b"\xff\xfe" + struct.pack("<I", 2)
    raw += struct.pack("<2Q", 1, 1) + struct.pack("<d", 1.0)
    with pytest.raises(SnapshotStructureError, match="UTF-8"):
        read_snapshot(io.BytesIO(raw))


def test_unsupported_version_rejected():
    raw = MAGIC + struct.pack("<III", 9, 0, 1)
    with pytest.raises(SnapshotStructureError, match="version"):
        read_snapshot(io.BytesIO(raw))


def test_dims_value_count_mismatch_rejected():
    with pytest.raises(SnapshotStructureError, match="imply"):
        LayerTensor("bad", (2, 3), np.zeros(5))


def test_constructor_invariants():
    with pytest.raises(SnapshotStructureError):
        LayerTensor("", (2, 2), np.zeros(4))
    with pytest.raises(SnapshotStructureError):
        LayerTensor("x", (2, 2, 2), np.zeros(8))
    with pytest.raises(SnapshotStructureError):
        WeightSnapshot(epoch=0, layers=())
    tensor = LayerTensor("dup", (1, 1), np.zeros(1))
    with pytest.raises(SnapshotStructureError):
        WeightSnapshot(epoch=0, layers=(tensor, tensor))
    with pytest.raises(SnapshotStructureError):
        WeightSnapshot(epoch=-1, layers=(tensor,))


def test_unicode_layer_names_roundtrip():
    snap = WeightSnapshot(
        epoch=2, layers=(LayerTensor("блок.0/conv→1", (1, 2), np.array([1.5, -2.5])),)
    )
    assert roundtrip(snap) == snap
