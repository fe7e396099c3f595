import struct

import numpy as np
import pytest

from edgeff.params import (
    CheckpointError,
    ParameterStore,
    load_checkpoint,
    save_checkpoint,
)


def small_store():
    rng = np.random.default_rng(5)
    store = ParameterStore()
    store.add("layer/w", rng.normal(size=(3, 4)))
    store.add("layer/b", rng.normal(size=4))
    store.add("scalar", np.asarray(2.5))
    return store


def test_round_trip_identity(tmp_path):
    store = small_store()
    path = tmp_path / "ck.bin"
    save_checkpoint(path, store)
    loaded = load_checkpoint(path)
    assert loaded.paths() == store.paths()
    for name in store.paths():
        assert np.array_equal(loaded[name].data, store[name].data)
        assert loaded[name].data.shape == store[name].data.shape


def test_version_byte_first_and_little_endian(tmp_path):
    store = ParameterStore()
    store.add("v", np.array([1.0, 2.0]))
    path = tmp_path / "ck.bin"
    save_checkpoint(path, store)
    blob = path.read_bytes()
    assert blob[0] == 1  # version byte
    (count,) = struct.unpack_from("<I", blob, 1)
    assert count == 1
    (plen,) = struct.unpack_from("<I", blob, 5)
    assert blob[9 : 9 + plen].decode() == "v"
    # payload is little-endian float64
    assert blob[-16:] == np.array([1.0, 2.0], dtype="<f8").tobytes()


def test_unsupported_version_rejected(tmp_path):
    store = small_store()
    path = tmp_path / "ck.bin"
    save_checkpoint(path, store)
    blob = bytearray(path.read_bytes())
    blob[0] = 99
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_truncation_rejected(tmp_path):
    store = small_store()
    path = tmp_path / "ck.bin"
    save_checkpoint(path, store)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) - 7])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_cast_on_load(tmp_path):
    store = small_store()
    path = tmp_path / "ck.bin"
    save_checkpoint(path, store)
    loaded = load_checkpoint(path, dtype=np.float32)
    assert loaded["layer/w"].data.dtype == np.float32


def test_save_is_deterministic(tmp_path):
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    save_checkpoint(a, small_store())
    save_checkpoint(b, small_store())
    assert a.read_bytes() == b.read_bytes()


def test_duplicate_and_unknown_paths():
    store = small_store()
    with pytest.raises(KeyError):
        store.add("layer/w", np.zeros(2))
    with pytest.raises(KeyError):
        store.assign("missing", np.zeros(2))


def test_float32_store_round_trips_through_float64(tmp_path):
    store = ParameterStore()
    values = np.array([0.1, 0.2, 0.3], dtype=np.float32)
    store.add("w", values)
    path = tmp_path / "ck.bin"
    save_checkpoint(path, store)
    loaded = load_checkpoint(path, dtype=np.float32)
    assert np.array_equal(loaded["w"].data, values)
