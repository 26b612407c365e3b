"""Tile-wise (1x128) FP8 quantization with real or power-of-two scales.

A row-wise tensor tiles each row into runs of 128 consecutive columns; a
column-wise tensor tiles each column into runs of 128 consecutive rows.
Codes are always stored in the logical ``rows x cols`` orientation, so
``q.T`` (a free relabelling) turns a column-wise tensor of ``X`` into the
row-wise tensor of ``X.T``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from fp8flow import codec
from fp8flow.counters import PassCounter, record
from fp8flow.errors import InvalidValue, InvariantViolation, ShapeError

TILE = 128

# Largest pre-rounding magnitude that still encodes to 448 (the RNE tie point
# between 448 and 480 resolves to 448); see compute_scale.
POW2_HEADROOM = 464.0


class Layout(enum.Enum):
    ROW = "row"
    COL = "col"

    @property
    def flipped(self) -> "Layout":
        return Layout.COL if self is Layout.ROW else Layout.ROW


class ScaleMode(enum.Enum):
    REAL = "real"
    POW2 = "pow2"


@dataclass(frozen=True)
class ScaleEntry:
    """One tile scale: an arbitrary positive real, or ``2**exponent``."""

    mode: ScaleMode
    real: float | None = None
    exponent: int | None = None

    def __post_init__(self):
        if self.mode is ScaleMode.REAL:
            if self.real is None or not self.real > 0 or not np.isfinite(self.real):
                raise InvalidValue(f"real scale must be positive and finite, got {self.real}")
        elif self.exponent is None or int(self.exponent) != self.exponent:
            raise InvalidValue(f"pow2 scale needs an integer exponent, got {self.exponent}")

    @property
    def value(self) -> float:
        if self.mode is ScaleMode.REAL:
            return float(self.real)
        return float(np.ldexp(1.0, int(self.exponent)))


def _check_finite(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise InvalidValue("quantization input contains non-finite values")


def _pow2_exponents(amax: np.ndarray) -> np.ndarray:
    # smallest T with amax <= 464 * 2**T, computed exactly from the binary exponent;
    # 464 = 0.90625 * 2**9
    frac, exp = np.frexp(amax)
    t = np.where(frac <= 0.90625, exp - 9, exp - 8)
    return np.where(amax == 0, 0, t).astype(np.int32)


def _scales_from_amax(amax: np.ndarray, mode: ScaleMode) -> np.ndarray:
    if mode is ScaleMode.REAL:
        return np.where(amax == 0, 1.0, amax / codec.E4M3_MAX)
    return _pow2_exponents(amax)


def scale_values(scales: np.ndarray, mode: ScaleMode) -> np.ndarray:
    """Scale matrix as float64 multipliers."""
    if mode is ScaleMode.REAL:
        return np.asarray(scales, dtype=np.float64)
    return np.ldexp(1.0, np.asarray(scales, dtype=np.int32))


def compute_scale(tile, mode: ScaleMode = ScaleMode.REAL) -> ScaleEntry:
    """Scale for a single 128-element tile.

    Real mode returns ``max|x| / 448``. Pow2 mode returns the smallest power of
    two ``s`` with ``max|x| / s <= 464``. Every value of such a tile rounds to at
    most 448, so nothing saturates, and requantizing the dequantized tile
    reproduces the same exponent. An all-zero tile gets scale 1 in both modes.
    """
    x = np.asarray(tile, dtype=np.float64).ravel()
    if x.size != TILE:
        raise ShapeError(f"a tile holds {TILE} values, got {x.size}")
    _check_finite(x)
    s = _scales_from_amax(np.array(np.abs(x).max()), mode)
    if mode is ScaleMode.REAL:
        return ScaleEntry(mode, real=float(s))
    return ScaleEntry(mode, exponent=int(s))


@dataclass(eq=False)
class QuantizedTensor:
    codes: np.ndarray
    scales: np.ndarray
    layout: Layout
    scale_mode: ScaleMode

    tile_len = TILE

    @property
    def rows(self) -> int:
        return self.codes.shape[0]

    @property
    def cols(self) -> int:
        return self.codes.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape

    def scale_shape(self, rows: int | None = None, cols: int | None = None) -> tuple[int, int]:
        rows = self.rows if rows is None else rows
        cols = self.cols if cols is None else cols
        if self.layout is Layout.ROW:
            return rows, cols // TILE
        return rows // TILE, cols

    def __eq__(self, other) -> bool:
        if not isinstance(other, QuantizedTensor):
            return NotImplemented
        return (
            self.layout is other.layout
            and self.scale_mode is other.scale_mode
            and np.array_equal(self.codes, other.codes)
            and self.scales.shape == other.scales.shape
            and np.array_equal(self.scales, other.scales)
        )

    def validate(self) -> "QuantizedTensor":
        if self.codes.ndim != 2 or self.codes.dtype != np.uint8:
            raise InvariantViolation("codes must be a 2-D uint8 array")
        tiled = self.cols if self.layout is Layout.ROW else self.rows
        if tiled % TILE:
            raise ShapeError(f"tiled dimension {tiled} is not a multiple of {TILE}")
        if self.scales.shape != self.scale_shape():
            raise InvariantViolation(f"scale shape {self.scales.shape} != {self.scale_shape()}")
        if np.any(codec.is_nan_code(self.codes)):
            raise InvariantViolation("quantized tensor holds NaN codes")
        if self.scale_mode is ScaleMode.REAL and not np.all(self.scales > 0):
            raise InvariantViolation("real scales must be positive")
        return self

    @property
    def T(self) -> "QuantizedTensor":
        return QuantizedTensor(self.codes.T, self.scales.T, self.layout.flipped, self.scale_mode)

    def scale_values(self) -> np.ndarray:
        return scale_values(self.scales, self.scale_mode)

    def decoded(self) -> np.ndarray:
        """E4M3 values of the codes, before scaling."""
        return codec.DECODE_TABLE[self.codes]

    def dequantized(self) -> np.ndarray:
        return dequantize(self)

    def unit_scale(self):
        return 1.0 if self.scale_mode is ScaleMode.REAL else 0

    def take_rows(self, index: np.ndarray) -> "QuantizedTensor":
        """Gather rows of a row-wise tensor; index ``-1`` yields a zero row with unit scale."""
        if self.layout is not Layout.ROW:
            raise ShapeError("row gather needs a row-wise tensor")
        index = np.asarray(index, dtype=np.int64)
        pad = index < 0
        src = np.where(pad, 0, index)
        codes = self.codes[src]
        scales = self.scales[src]
        codes[pad] = 0
        scales[pad] = self.unit_scale()
        return QuantizedTensor(codes, scales, self.layout, self.scale_mode)

    def row_slice(self, start: int, stop: int) -> "QuantizedTensor":
        if self.layout is Layout.ROW:
            return QuantizedTensor(self.codes[start:stop], self.scales[start:stop], self.layout, self.scale_mode)
        if start % TILE or stop % TILE:
            raise ShapeError("column-wise slices must fall on tile boundaries")
        return QuantizedTensor(
            self.codes[start:stop], self.scales[start // TILE : stop // TILE], self.layout, self.scale_mode
        )

    def pad_rows(self, total: int) -> "QuantizedTensor":
        """Append zero rows (unit scale) up to ``total`` rows."""
        extra = total - self.rows
        if extra < 0:
            raise ShapeError(f"cannot pad {self.rows} rows down to {total}")
        if extra == 0:
            return self
        codes = np.concatenate([self.codes, np.zeros((extra, self.cols), np.uint8)])
        new_shape = self.scale_shape(rows=total)
        if new_shape[0] * (TILE if self.layout is Layout.COL else 1) != total:
            raise ShapeError(f"padded row count {total} breaks {TILE}-row tiles")
        scales = np.full(new_shape, self.unit_scale(), dtype=self.scales.dtype)
        scales[: self.scales.shape[0]] = self.scales
        return QuantizedTensor(codes, scales, self.layout, self.scale_mode)


def _quantize_rows(x: np.ndarray, mode: ScaleMode) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = x.shape
    tiles = x.reshape(rows, cols // TILE, TILE)
    scales = _scales_from_amax(np.abs(tiles).max(axis=2), mode)
    if mode is ScaleMode.REAL:
        scaled = tiles / scales[..., None]
    else:
        scaled = np.ldexp(tiles, -scales[..., None])
    codes = codec.encode_e4m3(scaled).reshape(rows, cols)
    return codes, scales


def quantize(
    x,
    layout: Layout = Layout.ROW,
    mode: ScaleMode = ScaleMode.REAL,
    counter: PassCounter | None = None,
) -> QuantizedTensor:
    """Quantize a real matrix tile by tile: ``code = encode_e4m3(x / s)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {x.shape}")
    tiled = x.shape[1] if layout is Layout.ROW else x.shape[0]
    if tiled % TILE:
        raise ShapeError(f"{layout.value}-wise tiling needs a multiple of {TILE}, got {tiled}")
    _check_finite(x)
    record(counter, "quantize")
    if layout is Layout.ROW:
        codes, scales = _quantize_rows(x, mode)
        return QuantizedTensor(codes, scales, layout, mode)
    codes, scales = _quantize_rows(x.T, mode)
    return QuantizedTensor(codes.T, scales.T, layout, mode)


def dequantize(q: QuantizedTensor, counter: PassCounter | None = None) -> np.ndarray:
    """``decode(code) * s`` for every element, as float64."""
    record(counter, "dequantize")
    vals = q.decoded()
    if q.layout is Layout.ROW:
        tiles = vals.reshape(q.rows, q.cols // TILE, TILE)
        s = q.scales[..., None]
        out = tiles * s if q.scale_mode is ScaleMode.REAL else np.ldexp(tiles, s)
        return out.reshape(q.rows, q.cols)
    return dequantize(q.T).T
