import numpy as np
import pytest

from fp8flow.errors import FormatError, ShapeError, TruncatedFile
from fp8flow.rng import SeededStream
from fp8flow.tensorfile import HEADER, MAGIC, expected_size, from_bytes, read_tensor, to_bytes, write_tensor
from fp8flow.tile_quant import Layout, ScaleMode, quantize


def sample(layout=Layout.ROW, mode=ScaleMode.POW2, rows=128, cols=128):
    return quantize(SeededStream(0).normal((rows, cols)), layout, mode)


@pytest.mark.parametrize("layout", list(Layout))
@pytest.mark.parametrize("mode", list(ScaleMode))
def test_round_trip(tmp_path, layout, mode):
    q = sample(layout, mode, 256, 384)
    path = tmp_path / "t.f8t"
    n = write_tensor(q, path)
    assert n == path.stat().st_size == expected_size(layout, mode, 256, 384)
    back = read_tensor(path)
    assert back == q
    assert back.scales.dtype == (np.float64 if mode is ScaleMode.REAL else np.int32)


def test_pow2_file_size():
    assert len(to_bytes(sample())) == 16 + 16384 + 256
    assert len(to_bytes(sample(mode=ScaleMode.REAL))) == 16 + 16384 + 128 * 8


def test_header_fields():
    blob = to_bytes(sample(Layout.COL, ScaleMode.REAL, 128, 256))
    assert HEADER.size == 16
    assert HEADER.unpack_from(blob) == (MAGIC, 1, 1, 0, 0, 128, 256)


def test_bad_magic():
    blob = b"XXXX" + to_bytes(sample())[4:]
    with pytest.raises(FormatError, match="magic"):
        from_bytes(blob)


def test_bad_version_and_codes():
    blob = bytearray(to_bytes(sample()))
    blob[4] = 2
    with pytest.raises(FormatError, match="version"):
        from_bytes(bytes(blob))
    blob[4] = 1
    blob[5] = 7
    with pytest.raises(FormatError):
        from_bytes(bytes(blob))


def test_truncated_and_trailing():
    blob = to_bytes(sample())
    with pytest.raises(TruncatedFile):
        from_bytes(blob[:10])
    with pytest.raises(TruncatedFile):
        from_bytes(blob[:-1])
    with pytest.raises(FormatError, match="trailing"):
        from_bytes(blob + b"\0")


def test_inconsistent_header_shape():
    blob = bytearray(to_bytes(sample()))
    blob[12:16] = (100).to_bytes(4, "little")
    with pytest.raises(ShapeError):
        from_bytes(bytes(blob))


def test_invalid_content_is_a_format_error():
    q = sample(mode=ScaleMode.REAL)
    blob = bytearray(to_bytes(q))
    blob[-8:] = np.array([-1.0]).tobytes()  # a negative scale
    with pytest.raises(FormatError):
        from_bytes(bytes(blob))
