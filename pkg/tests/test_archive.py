import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prelab.archive import ArchiveError, MAGIC, read_archive, write_archive


def test_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    entries = {
        "a/x": rng.normal(size=(3, 4)).astype(np.float32),
        "scalar": np.float32(2.5),
        "empty_dim": np.zeros((0, 5), dtype=np.float32),
        "cube": rng.normal(size=(2, 2, 2)).astype(np.float32),
    }
    path = tmp_path / "t.prea"
    write_archive(path, entries)
    back = read_archive(path)
    assert list(back) == list(entries)
    for name, arr in entries.items():
        assert back[name].dtype == np.float32
        assert np.array_equal(back[name], np.asarray(arr, dtype=np.float32))


def test_float64_written_as_float32(tmp_path):
    x = np.array([1.0, 1 / 3], dtype=np.float64)
    path = tmp_path / "t.prea"
    write_archive(path, {"x": x})
    assert np.array_equal(read_archive(path)["x"], x.astype(np.float32))


def test_magic_and_layout(tmp_path):
    path = tmp_path / "t.prea"
    write_archive(path, {"v": np.arange(3, dtype=np.float32)})
    raw = path.read_bytes()
    assert raw[:4] == MAGIC == b"PREA"
    version, count = struct.unpack_from("<HI", raw, 4)
    assert (version, count) == (1, 1)
    (stored_crc,) = struct.unpack("<I", raw[-4:])
    assert stored_crc == zlib.crc32(raw[:-4]) & 0xFFFFFFFF


def test_duplicate_names_rejected(tmp_path):
    with pytest.raises(ArchiveError, match="duplicate"):
        write_archive(tmp_path / "t.prea", [("x", np.zeros(1)), ("x", np.zeros(1))])


def test_single_byte_corruption_detected(tmp_path):
    path = tmp_path / "t.prea"
    write_archive(path, {"x": np.arange(16, dtype=np.float32)})
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0x40
    path.write_bytes(bytes(raw))
    with pytest.raises(ArchiveError, match="CRC"):
        read_archive(path)


def test_truncation_detected(tmp_path):
    path = tmp_path / "t.prea"
    write_archive(path, {"x": np.arange(16, dtype=np.float32)})
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 9])
    with pytest.raises(ArchiveError):
        read_archive(path)


def test_bad_magic(tmp_path):
    path = tmp_path / "t.prea"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(ArchiveError, match="magic"):
        read_archive(path)


@st.composite
def tensor_entries(draw):
    n = draw(st.integers(1, 5))
    entries = []
    for i in range(n):
        rank = draw(st.integers(0, 3))
        dims = tuple(draw(st.integers(1, 6)) for _ in range(rank))
        vals = draw(st.lists(
            st.floats(-1e30, 1e30, width=32),
            min_size=int(np.prod(dims)) if rank else 1,
            max_size=int(np.prod(dims)) if rank else 1))
        arr = np.array(vals, dtype=np.float32).reshape(dims)
        entries.append((f"t{i}/{draw(st.text(min_size=1, max_size=8))}", arr))
    names = [e[0] for e in entries]
    if len(set(names)) != len(names):
        entries = [(f"{i}:{name}", arr) for i, (name, arr) in enumerate(entries)]
    return entries


@given(tensor_entries())
@settings(max_examples=200, deadline=None)
def test_property_round_trip(tmp_path_factory, entries):
    path = tmp_path_factory.mktemp("arch") / "t.prea"
    write_archive(path, entries)
    back = read_archive(path)
    assert [n for n, _ in entries] == list(back)
    for name, arr in entries:
        assert back[name].shape == arr.shape
        assert back[name].tobytes() == arr.tobytes()
