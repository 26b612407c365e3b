"""Seeded test matrices shared by the CLI self-test and the test suite."""

from __future__ import annotations

import numpy as np

from fp8flow.rng import SeededStream
from fp8flow.tile_quant import TILE


def tile_batch(seed: int, n_tiles: int) -> np.ndarray:
    """``n_tiles x 128`` matrix, one tile per row.

    Rows cycle through normal, uniform and log-normal draws and each row is
    rescaled by ``2**u`` with ``u`` uniform in [-24, 24), so the batch covers
    subnormal-heavy, flat and wide-range tiles. Every 37th row is all zero.
    """
    rs = SeededStream(seed)
    parts = [rs.normal((n_tiles, TILE)), rs.uniform((n_tiles, TILE), -1.0, 1.0), rs.lognormal((n_tiles, TILE), 2.0)]
    kind = np.arange(n_tiles) % 3
    x = np.choose(kind[:, None], parts)
    x = x * np.exp2(rs.uniform((n_tiles, 1), -24.0, 24.0))
    x[::37] = 0.0
    return x


def aligned_magnitudes(seed: int, rows: int, cols: int) -> np.ndarray:
    """Matrix whose row-wise pow2 quantization survives the direct transpose exactly.

    Row ``i`` holds values ``+-(1+u) * 2**e_i`` with ``u`` in [0, 1) and
    ``e_i`` in [-3, 3], so inside a tile every nonzero is at least half the
    tile maximum and block exponent spreads stay small enough that no shifted
    code reaches the subnormal range. About 5% of entries and every 29th row
    are exact zeros.
    """
    rs = SeededStream(seed)
    mag = 1.0 + rs.uniform((rows, cols))
    sign = np.where(rs.uniform((rows, cols)) < 0.5, -1.0, 1.0)
    e = np.floor(rs.uniform((rows, 1), -3.0, 4.0))
    x = sign * mag * np.exp2(e)
    x[rs.uniform((rows, cols)) < 0.05] = 0.0
    x[::29] = 0.0
    return x


def gaussian(seed: int, rows: int, cols: int) -> np.ndarray:
    return SeededStream(seed).normal((rows, cols))
