"""Row-wise to column-wise FP8 conversion, naive and scaling-aware.

Both paths take a row-wise tensor of ``X`` and return a column-wise tensor of
the same ``X`` (tiles of 128 consecutive rows). ``result.T`` is the row-wise
tensor of ``X.T``, i.e. the physically transposed buffer a Wgrad GEMM reads.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from fp8flow import codec
from fp8flow.counters import PassCounter, record
from fp8flow.errors import ScaleModeError, ShapeError
from fp8flow.tile_quant import TILE, Layout, QuantizedTensor, ScaleMode, dequantize, quantize

# Any shift of 19 or more sends every finite E4M3 value below half the
# smallest subnormal, so larger shifts behave like this one.
_MAX_SHIFT = 20


@lru_cache(maxsize=1)
def _flat_shift_table() -> tuple[np.ndarray, np.ndarray]:
    shifted, exact = codec.shift_table(_MAX_SHIFT)
    return shifted.ravel(), exact.ravel()


def _check_row_input(q: QuantizedTensor) -> None:
    if q.layout is not Layout.ROW:
        raise ShapeError("transpose expects a row-wise quantized tensor")
    if q.rows % TILE or q.cols % TILE:
        raise ShapeError(f"both dimensions must be multiples of {TILE}, got {q.shape}")


def naive_transpose(q: QuantizedTensor, counter: PassCounter | None = None) -> QuantizedTensor:
    """Dequantize, transpose, requantize: three full passes, two roundings."""
    _check_row_input(q)
    values = dequantize(q, counter=counter)
    record(counter, "transpose")
    transposed = np.ascontiguousarray(values.T)
    return quantize(transposed, Layout.ROW, q.scale_mode, counter=counter).T


def block_shifts(q: QuantizedTensor) -> tuple[np.ndarray, np.ndarray]:
    """Per-tile exponent shifts and aligned block exponents for ``direct_transpose``.

    Returns ``(k, t_max)``: ``k[i, t] = t_max[i // 128, t] - T[i, t]`` and
    ``t_max[b, t]`` the largest row-tile exponent in 128x128 block ``(b, t)``.
    Row tiles holding only zeros (0x00 or 0x80) carry an arbitrary scale, so
    they are left out of the maximum and get ``k = 0``; a block of only zero
    tiles keeps scale 2**0.
    """
    _check_row_input(q)
    if q.scale_mode is not ScaleMode.POW2:
        raise ScaleModeError("direct transpose requires power-of-two scales")
    t_row = q.scales.astype(np.int64)
    active = (q.codes & 0x7F).reshape(q.rows, q.cols // TILE, TILE).any(axis=2)
    nblk = q.rows // TILE
    masked = np.where(active, t_row, np.iinfo(np.int64).min).reshape(nblk, TILE, -1)
    t_max = masked.max(axis=1)
    t_max = np.where(t_max == np.iinfo(np.int64).min, 0, t_max)
    k = np.where(active, np.repeat(t_max, TILE, axis=0) - t_row, 0)
    return k, t_max


def direct_transpose(q: QuantizedTensor, counter: PassCounter | None = None) -> QuantizedTensor:
    """Scaling-aware transpose: align each 128x128 block to its largest scale and
    shift exponent bits, in one pass and without dequantizing."""
    k, t_max = block_shifts(q)
    record(counter, "direct_transpose")
    shifted, _ = _flat_shift_table()
    kk = np.minimum(np.repeat(k, TILE, axis=1), _MAX_SHIFT)
    codes = shifted[kk * 256 + q.codes]
    scales = np.repeat(t_max, TILE, axis=1).astype(q.scales.dtype)
    return QuantizedTensor(codes, scales, Layout.COL, ScaleMode.POW2)


def underflow_count(q: QuantizedTensor) -> int:
    """Elements whose value ``direct_transpose`` cannot carry over exactly."""
    k, _ = block_shifts(q)
    _, exact = _flat_shift_table()
    kk = np.minimum(np.repeat(k, TILE, axis=1), _MAX_SHIFT)
    return int(np.count_nonzero(~exact[kk * 256 + q.codes]))


@dataclass(frozen=True)
class ErrorStats:
    max_abs: float
    rms: float
    mean_abs: float
    nonzero_count: int
    total_count: int

    @classmethod
    def of(cls, err) -> "ErrorStats":
        err = np.asarray(err, dtype=np.float64)
        a = np.abs(err)
        return cls(
            max_abs=float(a.max()) if a.size else 0.0,
            rms=float(np.sqrt(np.mean(err * err))) if a.size else 0.0,
            mean_abs=float(a.mean()) if a.size else 0.0,
            nonzero_count=int(np.count_nonzero(err)),
            total_count=int(err.size),
        )

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DoubleQuantResult:
    """``error``: against the single-quantization reference Q_col(X).
    ``drift``: against D(Q_row(X)), the values the row-wise tensor held.
    ``underflow``: inexact shifts (direct path only)."""

    path: str
    error: ErrorStats
    drift: ErrorStats
    underflow: int | None

    def as_dict(self) -> dict:
        return {
            "path": self.path,
            "error": self.error.as_dict(),
            "drift": self.drift.as_dict(),
            "underflow": self.underflow,
        }


def double_quant_error(x, mode: ScaleMode = ScaleMode.REAL, path: str = "naive") -> DoubleQuantResult:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] % TILE or x.shape[1] % TILE:
        raise ShapeError(f"both dimensions must be multiples of {TILE}, got {x.shape}")
    if path not in ("naive", "direct"):
        raise ValueError(f"unknown transpose path {path!r}")
    if path == "direct" and mode is not ScaleMode.POW2:
        raise ScaleModeError("the direct path needs pow2 scales")
    q_row = quantize(x, Layout.ROW, mode)
    reference = dequantize(quantize(x, Layout.COL, mode))
    if path == "naive":
        out, underflow = naive_transpose(q_row), None
    else:
        out, underflow = direct_transpose(q_row), underflow_count(q_row)
    values = dequantize(out)
    return DoubleQuantResult(
        path=path,
        error=ErrorStats.of(values - reference),
        drift=ErrorStats.of(values - dequantize(q_row)),
        underflow=underflow,
    )
