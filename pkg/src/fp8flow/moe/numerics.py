"""Numeric backends and the simulated FP8 grouped-GEMM contract.

The interpreter never calls the codec directly; it goes through a backend.
``Fp8Numerics`` is the real thing. ``ExactNumerics`` is a test hook that
replaces quantization and grid rounding with the identity, so every recipe
must collapse onto the FP64 oracle bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fp8flow.codec import round_bf16
from fp8flow.errors import ShapeError
from fp8flow.fused_ops import fused_swiglu_quant, swiglu
from fp8flow.tile_quant import TILE, Layout, QuantizedTensor, ScaleMode, dequantize, quantize
from fp8flow.transpose import direct_transpose


@dataclass(eq=False)
class ExactTensor:
    """Stand-in for ``QuantizedTensor`` holding exact values and unit scales."""

    values: np.ndarray
    layout: Layout

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def T(self) -> "ExactTensor":
        return ExactTensor(self.values.T, self.layout.flipped)

    def take_rows(self, index) -> "ExactTensor":
        index = np.asarray(index, dtype=np.int64)
        out = self.values[np.where(index < 0, 0, index)]
        out[index < 0] = 0
        return ExactTensor(out, self.layout)

    def row_slice(self, start: int, stop: int) -> "ExactTensor":
        return ExactTensor(self.values[start:stop], self.layout)

    def pad_rows(self, total: int) -> "ExactTensor":
        return ExactTensor(pad_to(self.values, total), self.layout)

    def dequantized(self) -> np.ndarray:
        return self.values


def pad_to(x: np.ndarray, total: int) -> np.ndarray:
    extra = total - x.shape[0]
    if extra < 0:
        raise ShapeError(f"cannot pad {x.shape[0]} rows down to {total}")
    if extra == 0:
        return x
    return np.concatenate([x, np.zeros((extra,) + x.shape[1:], dtype=x.dtype)])


def tile_ceil(n: int) -> int:
    return -(-n // TILE) * TILE


class Fp8Numerics:
    exact = False

    def round(self, x: np.ndarray) -> np.ndarray:
        return round_bf16(x)

    def quantize(self, x, layout: Layout, mode: ScaleMode):
        return quantize(x, layout, mode)

    def dequantize(self, q) -> np.ndarray:
        return dequantize(q)

    def direct_transpose(self, q):
        return direct_transpose(q)

    def swiglu_quant(self, h, mode: ScaleMode):
        return fused_swiglu_quant(h, Layout.ROW, mode)


class ExactNumerics:
    exact = True

    def round(self, x: np.ndarray) -> np.ndarray:
        return x

    def quantize(self, x, layout: Layout, mode: ScaleMode):
        return ExactTensor(np.asarray(x, dtype=np.float64), layout)

    def dequantize(self, q) -> np.ndarray:
        return q.values

    def direct_transpose(self, q):
        return ExactTensor(q.values, Layout.COL)

    def swiglu_quant(self, h, mode: ScaleMode):
        return ExactTensor(swiglu(h), Layout.ROW)


FP8 = Fp8Numerics()
EXACT = ExactNumerics()


def _operand(x, want: Layout) -> tuple[np.ndarray, np.ndarray | None]:
    if isinstance(x, np.ndarray):
        return x, None
    if isinstance(x, QuantizedTensor):
        if x.layout is not want:
            raise ShapeError(f"GEMM operand must be {want.value}-wise along K, got {x.layout.value}-wise")
        return x.decoded(), x.scale_values()
    return x.values, None


def tiled_gemm(a, b, k_weights: np.ndarray | None = None) -> np.ndarray:
    """``A @ B`` under the simulated FP8 tensor-core contract.

    ``a`` is ``M x K`` with tiles along K (row-wise), ``b`` is ``K x N`` with
    tiles along K (column-wise). Per 128-wide K slice the decoded codes are
    multiplied at working precision, then the partial product is scaled by the
    A row-tile scale and the B column-tile scale and accumulated. Real matrices
    and exact stand-ins skip the scale step. ``k_weights`` multiplies rows of the
    decoded B operand (per-row gates in Wgrad).
    """
    av, sa = _operand(a, Layout.ROW)
    bv, sb = _operand(b, Layout.COL)
    m, k = av.shape
    if bv.shape[0] != k:
        raise ShapeError(f"inner dimensions differ: {av.shape} @ {bv.shape}")
    if k % TILE:
        raise ShapeError(f"K={k} is not a multiple of {TILE}")
    if k_weights is not None:
        bv = bv * np.asarray(k_weights, dtype=np.float64)[:, None]
    acc = np.zeros((m, bv.shape[1]))
    for t in range(k // TILE):
        ks = slice(t * TILE, (t + 1) * TILE)
        part = av[:, ks] @ bv[ks]
        if sa is not None:
            part = part * sa[:, t : t + 1]
        if sb is not None:
            part = part * sb[t : t + 1, :]
        acc += part
    return acc


__all__ = [
    "EXACT",
    "FP8",
    "ExactNumerics",
    "ExactTensor",
    "Fp8Numerics",
    "pad_to",
    "tile_ceil",
    "tiled_gemm",
]
