import numpy as np
import pytest
from hypothesis import given, strategies as st

from dwshare.errors import FormatError, InvalidArgumentError, ShapeError
from dwshare.tensor import (DTB_MAGIC, alloc, checksum, dtb_bytes, dtb_from_bytes, he_init, load_dtb,
                            make_rng, save_dtb)


def test_rng_streams_are_reproducible_and_distinct():
    a = make_rng(5, 1, 2).standard_normal(8)
    b = make_rng(5, 1, 2).standard_normal(8)
    c = make_rng(5, 1, 3).standard_normal(8)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    with pytest.raises(InvalidArgumentError):
        make_rng(-1)


def test_alloc_rejects_empty_dims():
    assert alloc((2, 3), 1.5).sum() == 9.0
    with pytest.raises(ShapeError):
        alloc((2, 0))


def test_he_init_scale():
    w = he_init((3, 3, 64, 64), 3 * 3 * 64, make_rng(0), np.float64)
    assert w.std() == pytest.approx(np.sqrt(2 / 576), rel=0.03)
    assert abs(w.mean()) < 0.005
    with pytest.raises(InvalidArgumentError):
        he_init((2,), 0, make_rng(0))


def test_checksum_sees_dtype_shape_and_values():
    a = np.arange(6, dtype=np.float32)
    assert checksum(a) == checksum(a.copy())
    assert checksum(a) != checksum(a.reshape(2, 3))
    assert checksum(a) != checksum(a.astype(np.float64))
    b = a.copy()
    b[3] = np.nextafter(b[3], np.float32(10))
    assert checksum(a) != checksum(b)


@given(st.sampled_from([np.float32, np.float64]), st.lists(st.integers(1, 4), min_size=1, max_size=4))
def test_dtb_round_trip(dtype, shape):
    t = make_rng(len(shape)).standard_normal(shape).astype(dtype)
    buf = dtb_bytes(t)
    assert buf[:4] == DTB_MAGIC
    back = dtb_from_bytes(buf)
    assert back.dtype == t.dtype and back.shape == t.shape and np.array_equal(back, t)


def test_dtb_layout_is_little_endian():
    buf = dtb_bytes(np.array([[1.0, 2.0]], dtype=np.float64))
    assert buf[4] == 1 and buf[5] == 2
    assert int.from_bytes(buf[6:14], "little") == 1 and int.from_bytes(buf[14:22], "little") == 2
    assert np.frombuffer(buf[22:], "<f8").tolist() == [1.0, 2.0]


def test_dtb_rejects_corruption(tmp_path):
    buf = dtb_bytes(np.ones((2, 3), np.float32))
    with pytest.raises(FormatError, match="magic"):
        dtb_from_bytes(b"XXXX" + buf[4:])
    with pytest.raises(FormatError, match="payload"):
        dtb_from_bytes(buf[:-1])
    with pytest.raises(FormatError):
        dtb_from_bytes(buf[:4] + bytes([7]) + buf[5:])
    with pytest.raises(FormatError):
        dtb_bytes(np.ones(3, np.int32))
    path = tmp_path / "t.dtb"
    save_dtb(path, np.ones(3))
    assert np.array_equal(load_dtb(path), np.ones(3))
    with pytest.raises(FormatError, match="missing"):
        load_dtb(tmp_path / "nope.dtb")
