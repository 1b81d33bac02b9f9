"""Binary tensor container: format examples, round trips, parse errors."""

import io

import numpy as np
import pytest

from bevsplat.tensor_io import (
    TensorContainer,
    TensorFormatError,
    read_tensor,
    write_tensor,
)


def roundtrip(t: TensorContainer) -> TensorContainer:
    buf = io.BytesIO()
    write_tensor(t, buf)
    buf.seek(0)
    return read_tensor(buf)


def test_f32_2x2_byte_count():
    t = TensorContainer.from_array(np.array([[1, 2], [3, 4]], dtype=np.float32))
    buf = io.BytesIO()
    # header: 4 magic + 4 version + 4 dtype + 4 ndim + 2*8 dims = 32, payload 16
    assert write_tensor(t, buf) == 48
    assert len(buf.getvalue()) == 48


def test_f64_scalar_byte_count():
    # header: 4 magic + 4 version + 4 dtype + 4 ndim + 1*8 dims = 24, payload 8
    t = TensorContainer.from_array(np.zeros(1, dtype=np.float64))
    buf = io.BytesIO()
    assert write_tensor(t, buf) == 32


def test_roundtrip_identity():
    t = TensorContainer.from_array(np.arange(24, dtype=np.float64).reshape(2, 3, 4))
    back = roundtrip(t)
    assert back == t
    assert back.shape == (2, 3, 4)


def test_bad_magic_names_field():
    blob = bytearray(io.BytesIO().getvalue())
    t = TensorContainer.from_array(np.ones(2, dtype=np.float32))
    buf = io.BytesIO()
    write_tensor(t, buf)
    blob = bytearray(buf.getvalue())
    blob[:4] = b"XYZW"
    with pytest.raises(TensorFormatError, match="magic"):
        read_tensor(io.BytesIO(bytes(blob)))


def test_bad_version_and_dtype_code():
    t = TensorContainer.from_array(np.ones(2, dtype=np.float32))
    buf = io.BytesIO()
    write_tensor(t, buf)
    blob = bytearray(buf.getvalue())
    blob[4] = 9
    with pytest.raises(TensorFormatError, match="version"):
        read_tensor(io.BytesIO(bytes(blob)))
    blob[4] = 1
    blob[8] = 7
    with pytest.raises(TensorFormatError, match="dtype"):
        read_tensor(io.BytesIO(bytes(blob)))


def test_truncated_payload():
    t = TensorContainer.from_array(np.ones((2, 2), dtype=np.float32))
    buf = io.BytesIO()
    write_tensor(t, buf)
    blob = buf.getvalue()[:-4]  # 12 of 16 payload bytes
    with pytest.raises(TensorFormatError, match="truncated payload"):
        read_tensor(io.BytesIO(blob))


def test_reader_consumes_exactly_its_bytes():
    buf = io.BytesIO()
    a = TensorContainer.from_array(np.arange(6, dtype=np.float32).reshape(2, 3))
    b = TensorContainer.from_array(np.arange(4, dtype=np.float64))
    write_tensor(a, buf)
    write_tensor(b, buf)
    buf.seek(0)
    assert read_tensor(buf) == a
    assert read_tensor(buf) == b


def test_invalid_shapes_rejected():
    with pytest.raises(TensorFormatError):
        TensorContainer("f32", (), np.zeros(0, dtype=np.float32))
    with pytest.raises(TensorFormatError):
        TensorContainer("f32", (2, 0), np.zeros(0, dtype=np.float32))
    with pytest.raises(TensorFormatError):
        TensorContainer("f32", (1, 1, 1, 1, 1), np.zeros(1, dtype=np.float32))
    with pytest.raises(TensorFormatError):
        TensorContainer("f32", (3,), np.zeros(2, dtype=np.float32))


def test_sink_failure_reports_byte_offset():
    from bevsplat.tensor_io import TensorSinkError

    class Broken:
        def write(self, data):
            raise OSError("disk full")

    t = TensorContainer.from_array(np.ones((2, 2), dtype=np.float32))
    with pytest.raises(TensorSinkError, match="byte offset 0"):
        write_tensor(t, Broken())

    class BreaksOnPayload:
        def __init__(self):
            self.calls = 0

        def write(self, data):
            self.calls += 1
            if self.calls > 1:
                raise OSError("disk full")

    with pytest.raises(TensorSinkError, match="byte offset 32"):
        write_tensor(t, BreaksOnPayload())


def test_random_tensors_roundtrip_bitwise():
    rng = np.random.default_rng(42)
    for _ in range(200):
        ndim = rng.integers(1, 5)
        shape = tuple(int(d) for d in rng.integers(1, 5, size=ndim))
        dtype = np.float32 if rng.random() < 0.5 else np.float64
        arr = rng.normal(size=shape).astype(dtype)
        t = TensorContainer.from_array(arr)
        back = roundtrip(t)
        assert back.dtype == t.dtype
        assert back.shape == t.shape
        assert back.values.tobytes() == t.values.tobytes()
