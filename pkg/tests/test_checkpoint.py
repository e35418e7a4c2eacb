"""Binary array checkpoint: bit-exact round trips and corruption handling."""

import struct
from collections import OrderedDict

import numpy as np
import pytest

from edgeuda.checkpoint import MAGIC, VERSION, CheckpointError, load_arrays, save_arrays


def test_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = OrderedDict(
        [
            ("w", rng.standard_normal((3, 4, 5))),
            ("b", rng.standard_normal(7)),
            ("scalar", np.asarray(3.141592653589793)),
            ("empty", np.zeros((0, 2))),
        ]
    )
    path = tmp_path / "model.euda"
    save_arrays(path, arrays)
    loaded = load_arrays(path)
    assert list(loaded) == list(arrays)  # order preserved
    for name in arrays:
        got, want = loaded[name], arrays[name]
        assert got.shape == want.shape
        assert got.dtype == np.float64
        np.testing.assert_array_equal(got, want)
        got[...] = 0.0  # must be a writable copy


def test_round_trip_preserves_exact_bits(tmp_path):
    # values with no short decimal representation survive exactly
    vals = np.array([np.nextafter(1.0, 2.0), 1e-308, -0.0, 2**-52])
    path = tmp_path / "bits.euda"
    save_arrays(path, {"v": vals})
    out = load_arrays(path)["v"]
    assert out.tobytes() == vals.tobytes()


def test_unicode_names(tmp_path):
    path = tmp_path / "u.euda"
    save_arrays(path, {"поле/w": np.ones(2)})
    assert "поле/w" in load_arrays(path)


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.euda"
    path.write_bytes(b"NOPE" + struct.pack("<I", VERSION))
    with pytest.raises(CheckpointError):
        load_arrays(path)


def test_bad_version(tmp_path):
    path = tmp_path / "bad.euda"
    path.write_bytes(MAGIC + struct.pack("<I", 99))
    with pytest.raises(CheckpointError):
        load_arrays(path)


def test_truncation_everywhere(tmp_path):
    src = tmp_path / "full.euda"
    save_arrays(src, {"weight": np.arange(6.0).reshape(2, 3)})
    blob = src.read_bytes()
    # chopping the file anywhere after the header must raise, never crash
    for cut in range(9, len(blob)):
        trunc = tmp_path / "t.euda"
        trunc.write_bytes(blob[:cut])
        with pytest.raises(CheckpointError):
            load_arrays(trunc)


def test_double_save_overwrites(tmp_path):
    path = tmp_path / "m.euda"
    save_arrays(path, {"a": np.ones(3)})
    save_arrays(path, {"b": np.zeros(2)})
    loaded = load_arrays(path)
    assert list(loaded) == ["b"]
