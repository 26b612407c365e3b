"""Binary file format for quantized tensors.

Layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"F8T1"
    4       1     version (1)
    5       1     layout (0 row, 1 col)
    6       1     scale mode (0 real, 1 pow2)
    7       1     reserved (0)
    8       4     rows (u32)
    12      4     cols (u32)
    16      R*C   codes, row-major over the logical rows x cols matrix
    ...           scales, row-major over the scale matrix: f64 (real) or i16 (pow2)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from fp8flow.errors import FormatError, InvariantViolation, ShapeError, TruncatedFile
from fp8flow.tile_quant import TILE, Layout, QuantizedTensor, ScaleMode

MAGIC = b"F8T1"
VERSION = 1
HEADER = struct.Struct("<4sBBBBII")

_LAYOUT_CODE = {Layout.ROW: 0, Layout.COL: 1}
_MODE_CODE = {ScaleMode.REAL: 0, ScaleMode.POW2: 1}
_SCALE_DTYPE = {ScaleMode.REAL: np.dtype("<f8"), ScaleMode.POW2: np.dtype("<i2")}


def _scale_shape(layout: Layout, rows: int, cols: int) -> tuple[int, int]:
    return (rows, cols // TILE) if layout is Layout.ROW else (rows // TILE, cols)


def expected_size(layout: Layout, mode: ScaleMode, rows: int, cols: int) -> int:
    n_scales = int(np.prod(_scale_shape(layout, rows, cols)))
    return HEADER.size + rows * cols + n_scales * _SCALE_DTYPE[mode].itemsize


def to_bytes(q: QuantizedTensor) -> bytes:
    q.validate()
    if q.scale_mode is ScaleMode.POW2 and (q.scales.min(initial=0) < -(2**15) or q.scales.max(initial=0) >= 2**15):
        raise ShapeError("pow2 exponent does not fit in 16 bits")
    header = HEADER.pack(MAGIC, VERSION, _LAYOUT_CODE[q.layout], _MODE_CODE[q.scale_mode], 0, q.rows, q.cols)
    codes = np.ascontiguousarray(q.codes, dtype=np.uint8).tobytes()
    scales = np.ascontiguousarray(q.scales).astype(_SCALE_DTYPE[q.scale_mode]).tobytes()
    return header + codes + scales


def from_bytes(blob: bytes) -> QuantizedTensor:
    if len(blob) < HEADER.size:
        raise TruncatedFile(f"file holds {len(blob)} bytes, header alone needs {HEADER.size}")
    magic, version, layout_code, mode_code, _, rows, cols = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    layouts = {v: k for k, v in _LAYOUT_CODE.items()}
    modes = {v: k for k, v in _MODE_CODE.items()}
    if layout_code not in layouts or mode_code not in modes:
        raise FormatError(f"bad layout/scale-mode byte ({layout_code}, {mode_code})")
    layout, mode = layouts[layout_code], modes[mode_code]
    tiled = cols if layout is Layout.ROW else rows
    if tiled % TILE:
        raise ShapeError(f"{layout.value}-wise tensor needs a multiple of {TILE}, header says {rows}x{cols}")
    want = expected_size(layout, mode, rows, cols)
    if len(blob) < want:
        raise TruncatedFile(f"file holds {len(blob)} bytes, header implies {want}")
    if len(blob) > want:
        raise FormatError(f"file holds {len(blob)} bytes, header implies {want} (trailing data)")
    n_codes = rows * cols
    codes = np.frombuffer(blob, np.uint8, n_codes, HEADER.size).reshape(rows, cols).copy()
    sshape = _scale_shape(layout, rows, cols)
    raw = np.frombuffer(blob, _SCALE_DTYPE[mode], int(np.prod(sshape)), HEADER.size + n_codes).reshape(sshape)
    scales = raw.astype(np.float64 if mode is ScaleMode.REAL else np.int32)
    try:
        return QuantizedTensor(codes, scales, layout, mode).validate()
    except InvariantViolation as exc:
        raise FormatError(f"file content is not a valid quantized tensor: {exc}") from None


def write_tensor(q: QuantizedTensor, path) -> int:
    blob = to_bytes(q)
    Path(path).write_bytes(blob)
    return len(blob)


def read_tensor(path) -> QuantizedTensor:
    return from_bytes(Path(path).read_bytes())
