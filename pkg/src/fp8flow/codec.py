"""Bit-exact FP8 E4M3 encode/decode and BF16 grid rounding.

E4M3 layout, most significant bit first::

    SN(1) | E(4) | M(3)        bias 7, no infinities

* normal   (1 <= E <= 15, not E=15/M=7): (-1)^SN * 2^(E-7) * (1 + M/8)
* subnormal (E == 0):                    (-1)^SN * 2^-6 * (M/8)
* 0x7F / 0xFF:                           NaN

Every function accepts a Python scalar or a NumPy array. Scalars come back
as ``int`` / ``float``; arrays come back as ``uint8`` / ``float64`` arrays.
"""

from __future__ import annotations

import enum

import numpy as np

from fp8flow.errors import InvalidValue

__all__ = [
    "E4M3_MAX",
    "E4M3_MIN_SUBNORMAL",
    "DECODE_TABLE",
    "RoundingMode",
    "fields",
    "is_nan_code",
    "decode_e4m3",
    "encode_e4m3",
    "shift_exponent",
    "shift_table",
    "round_bf16",
]

E4M3_BIAS = 7
E4M3_MAX = 448.0
E4M3_MIN_SUBNORMAL = 2.0**-9
NAN_CODE = 0x7F


class RoundingMode(enum.Enum):
    """Only deterministic round-to-nearest-even is supported."""

    RNE = "round-to-nearest-even"


def _build_decode_table() -> np.ndarray:
    table = np.empty(256, dtype=np.float64)
    for code in range(256):
        sign = -1.0 if code & 0x80 else 1.0
        exp = (code >> 3) & 0xF
        man = code & 0x7
        if exp == 0xF and man == 0x7:
            table[code] = np.nan
        elif exp == 0:
            table[code] = sign * 2.0**-6 * (man / 8.0)  # 0x80 gives -0.0
        else:
            table[code] = sign * 2.0 ** (exp - E4M3_BIAS) * (1.0 + man / 8.0)
    table.setflags(write=False)
    return table


DECODE_TABLE = _build_decode_table()

# Non-negative finite grid, indexed by code 0x00..0x7E (strictly increasing).
_POS_GRID = DECODE_TABLE[:0x7F].copy()
_MIDPOINTS = (_POS_GRID[:-1] + _POS_GRID[1:]) / 2.0


def _scalar_or_array(out: np.ndarray, scalar: bool, kind: type):
    return kind(out.item()) if scalar else out


def fields(code):
    """Split a code into ``(sign, exponent, mantissa)`` bit fields."""
    c = np.asarray(code, dtype=np.uint8)
    return (c >> 7) & 0x1, (c >> 3) & 0xF, c & 0x7


def is_nan_code(code):
    c = np.asarray(code, dtype=np.uint8)
    return (c & 0x7F) == NAN_CODE


def decode_e4m3(code):
    """Decode E4M3 bit patterns to exact float64 values (NaN patterns -> NaN)."""
    c = np.asarray(code)
    if c.dtype.kind not in "ui":
        raise InvalidValue(f"codes must be integers, got dtype {c.dtype}")
    if c.size and (c.min() < 0 or c.max() > 0xFF):
        raise InvalidValue("codes must lie in [0, 255]")
    out = DECODE_TABLE[c.astype(np.uint8)]
    return _scalar_or_array(out, c.ndim == 0, float)


def encode_e4m3(value, rounding: RoundingMode = RoundingMode.RNE):
    """Encode reals to the nearest E4M3 code, ties to even, saturating at +-448.

    Magnitudes above 448 clamp to 0x7E / 0xFE. The sign bit is always kept,
    so -0.0 and negative values that round to zero encode as 0x80.
    """
    if rounding is not RoundingMode.RNE:
        raise InvalidValue(f"unsupported rounding mode {rounding!r}")
    v = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise InvalidValue("cannot encode non-finite value to E4M3")
    a = np.minimum(np.abs(v), E4M3_MAX).ravel()
    idx = np.searchsorted(_MIDPOINTS, a, side="left")
    # a sitting exactly on a midpoint goes to the neighbour with even mantissa
    on_mid = _MIDPOINTS[np.minimum(idx, _MIDPOINTS.size - 1)] == a
    idx = np.where(on_mid & (idx & 1 == 1), idx + 1, idx)
    codes = idx.astype(np.uint8).reshape(v.shape)
    codes = np.where(np.signbit(v), codes | 0x80, codes).astype(np.uint8)
    return _scalar_or_array(codes, v.ndim == 0, int)


def shift_exponent(code, k):
    """Divide the encoded value by ``2**k`` and return the E4M3 code of the result.

    Normal codes whose exponent field stays >= 1 are rewritten in place as
    ``SN | (E - k) | M`` (exact). Anything entering the subnormal range is
    re-encoded from its value with round-to-nearest-even. NaN propagates and
    both zero patterns (0x00, 0x80) are left untouched.
    """
    c = np.asarray(code)
    kk = np.asarray(k)
    if kk.size and kk.min() < 0:
        raise InvalidValue("shift_exponent only shifts toward smaller magnitude (k >= 0)")
    c, kk = np.broadcast_arrays(c.astype(np.uint8), kk.astype(np.int64))
    exp = ((c >> 3) & 0xF).astype(np.int64)
    nan = is_nan_code(c)
    fast = (exp >= 1) & (exp - kk >= 1) & ~nan
    out = np.where(fast, c.astype(np.int64) - (kk << 3), c.astype(np.int64))
    # both zero patterns are fixed points, so shift(c, 0) == c for every code
    slow = ~fast & ~nan & ((c & 0x7F) != 0)
    if np.any(slow):
        small = np.ldexp(DECODE_TABLE[c[slow]], -kk[slow])
        out[slow] = encode_e4m3(small)
    out = out.astype(np.uint8)
    return _scalar_or_array(out, np.ndim(code) == 0 and np.ndim(k) == 0, int)


def shift_table(max_k: int) -> tuple[np.ndarray, np.ndarray]:
    """Tabulate ``shift_exponent`` for every code and every ``k <= max_k``.

    Returns ``(codes, exact)``, both of shape ``(max_k + 1, 256)``: the shifted
    code, and whether the shifted value equals ``decode(code) * 2**-k`` exactly.
    """
    ks = np.arange(max_k + 1)[:, None]
    all_codes = np.arange(256, dtype=np.uint8)[None, :]
    shifted = shift_exponent(all_codes, ks)
    with np.errstate(invalid="ignore"):
        exact = np.ldexp(DECODE_TABLE[shifted], ks) == DECODE_TABLE[all_codes]
    exact |= is_nan_code(all_codes)
    return shifted, exact


def round_bf16(value):
    """Round float64 values onto the BF16 grid (8 significant bits), ties to even."""
    v = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise InvalidValue("round_bf16 requires finite input")
    _, e = np.frexp(v)
    # clamp to the smallest normal binade so subnormals share its quantum (2^-133)
    e = np.maximum(e, -125)
    out = np.ldexp(np.rint(np.ldexp(v, 8 - e)), e - 8)
    return _scalar_or_array(out, v.ndim == 0, float)
