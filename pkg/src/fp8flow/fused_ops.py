"""Routing plus fused data-movement and activation operators.

Each fused operator has an unfused reference composition here as well; the
two must agree bit for bit. Pass counters record one read and one write for
a fused operator and one of each per stage for the composition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fp8flow.codec import round_bf16
from fp8flow.counters import PassCounter, record
from fp8flow.errors import ConfigError, ShapeError
from fp8flow.tile_quant import TILE, Layout, QuantizedTensor, ScaleMode, dequantize, quantize

PAD = -1


@dataclass(frozen=True)
class RoutingPlan:
    """Token-to-expert assignment and the padded expert-major buffer layout.

    ``experts[t, j]`` / ``gates[t, j]`` hold token ``t``'s ``j``-th choice.
    ``inverse_map[r]`` is the source token of buffer row ``r`` (``PAD`` for
    padding) and ``slot_map[r]`` its choice index; ``row_of[t, j]`` is the
    buffer row holding token ``t``'s ``j``-th copy.
    """

    num_tokens: int
    num_experts: int
    top_k: int
    experts: np.ndarray
    gates: np.ndarray
    expert_counts: np.ndarray
    padded_counts: np.ndarray
    offsets: np.ndarray
    inverse_map: np.ndarray
    slot_map: np.ndarray
    row_of: np.ndarray
    pad_multiple: int = 16

    @property
    def padded_rows(self) -> int:
        return int(self.offsets[-1])

    def expert_rows(self, e: int) -> slice:
        return slice(int(self.offsets[e]), int(self.offsets[e + 1]))

    @property
    def compact_map(self) -> np.ndarray:
        """Buffer rows that carry tokens, in buffer order."""
        return np.flatnonzero(self.inverse_map != PAD)


def plan_from_assignments(experts, gates, num_experts: int, pad_multiple: int = 16) -> RoutingPlan:
    experts = np.asarray(experts, dtype=np.int64)
    gates = np.asarray(gates, dtype=np.float64)
    if experts.ndim != 2 or experts.shape != gates.shape:
        raise ShapeError("experts and gates must both be (tokens, top_k)")
    if pad_multiple < 1:
        raise ConfigError("pad_multiple must be positive")
    tokens, top_k = experts.shape
    if experts.size and (experts.min() < 0 or experts.max() >= num_experts):
        raise ConfigError("expert id out of range")
    for row in experts:
        if len(set(row.tolist())) != top_k:
            raise ConfigError("a token may select each expert at most once")
    counts = np.bincount(experts.ravel(), minlength=num_experts)
    padded = -(-counts // pad_multiple) * pad_multiple
    offsets = np.concatenate([[0], np.cumsum(padded)])
    inverse = np.full(int(offsets[-1]), PAD, dtype=np.int64)
    slots = np.full(int(offsets[-1]), PAD, dtype=np.int64)
    row_of = np.empty((tokens, top_k), dtype=np.int64)
    for e in range(num_experts):
        tok, slot = np.nonzero(experts == e)  # row-major: ascending token order
        rows = offsets[e] + np.arange(tok.size)
        inverse[rows] = tok
        slots[rows] = slot
        row_of[tok, slot] = rows
    return RoutingPlan(
        num_tokens=tokens,
        num_experts=num_experts,
        top_k=top_k,
        experts=experts,
        gates=gates,
        expert_counts=counts,
        padded_counts=padded,
        offsets=offsets,
        inverse_map=inverse,
        slot_map=slots,
        row_of=row_of,
        pad_multiple=pad_multiple,
    )


def build_routing(gate_logits, top_k: int, pad_multiple: int = 16) -> RoutingPlan:
    """Top-k routing with softmax over the selected logits.

    Ties go to the lower expert index.
    """
    logits = np.asarray(gate_logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ShapeError("gate logits must be (tokens, experts)")
    num_experts = logits.shape[1]
    if not 1 <= top_k <= num_experts:
        raise ConfigError(f"top_k={top_k} must lie in [1, {num_experts}]")
    order = np.argsort(-logits, axis=1, kind="stable")[:, :top_k]
    chosen = np.take_along_axis(logits, order, axis=1)
    w = np.exp(chosen - chosen[:, :1])
    gates = w / w.sum(axis=1, keepdims=True)
    return plan_from_assignments(order, gates, num_experts, pad_multiple)


def _check_tokens(tokens, plan: RoutingPlan) -> None:
    if tokens.shape[0] != plan.num_tokens:
        raise ShapeError(f"plan routes {plan.num_tokens} tokens, got {tokens.shape[0]}")


def _gather_rows(x, index):
    if isinstance(x, np.ndarray):
        index = np.asarray(index)
        out = x[np.where(index < 0, 0, index)]
        out[index < 0] = 0
        return out
    return x.take_rows(index)


# -- permute + pad ---------------------------------------------------------


def permute(tokens, plan: RoutingPlan, counter: PassCounter | None = None):
    """Expert-major copy of the token rows without padding."""
    _check_tokens(tokens, plan)
    record(counter, "permute")
    return _gather_rows(tokens, plan.inverse_map[plan.compact_map])


def pad(permuted, plan: RoutingPlan, counter: PassCounter | None = None):
    """Insert zero rows so every expert batch is a multiple of ``pad_multiple``."""
    if permuted.shape[0] != plan.compact_map.size:
        raise ShapeError("permuted buffer does not match the plan")
    record(counter, "pad")
    index = np.full(plan.padded_rows, PAD, dtype=np.int64)
    index[plan.compact_map] = np.arange(plan.compact_map.size)
    return _gather_rows(permuted, index)


def fused_permute_pad(tokens, plan: RoutingPlan, counter: PassCounter | None = None):
    """Reorder tokens into the padded expert-major buffer in a single gather.

    Works on real matrices and on row-wise ``QuantizedTensor`` inputs (codes
    and scales travel together; padding rows get code 0x00 and scale 1).
    """
    _check_tokens(tokens, plan)
    if isinstance(tokens, QuantizedTensor) and tokens.layout is not Layout.ROW:
        raise ShapeError("only row-wise (per-token) tensors can be permuted")
    record(counter, "fused_permute_pad")
    return _gather_rows(tokens, plan.inverse_map)


# -- unpermute + unpad (+ combine) -----------------------------------------


def _rows_as_real(x, index) -> np.ndarray:
    part = _gather_rows(x, index)
    return part if isinstance(part, np.ndarray) else part.dequantized()


def _weighted_sum(slot_rows: list[np.ndarray], gates) -> np.ndarray:
    if gates is None:
        acc = slot_rows[0].copy()
        for rows in slot_rows[1:]:
            acc = acc + rows
        return acc
    acc = gates[:, 0:1] * slot_rows[0]
    for j in range(1, len(slot_rows)):
        acc = acc + gates[:, j : j + 1] * slot_rows[j]
    return acc


def _check_buffer(buffer, plan: RoutingPlan, gates):
    if buffer.shape[0] != plan.padded_rows:
        raise ShapeError(f"buffer has {buffer.shape[0]} rows, plan expects {plan.padded_rows}")
    if gates is not None:
        gates = np.asarray(gates, dtype=np.float64)
        if gates.shape != (plan.num_tokens, plan.top_k):
            raise ShapeError("gates must be (tokens, top_k)")
    return gates


def unpad(buffer, plan: RoutingPlan, counter: PassCounter | None = None):
    record(counter, "unpad")
    return _gather_rows(buffer, plan.compact_map)


def unpermute(compact, plan: RoutingPlan, counter: PassCounter | None = None) -> list:
    """Split compact expert-major rows back into per-choice token matrices."""
    record(counter, "unpermute")
    position = np.empty(plan.padded_rows, dtype=np.int64)
    position[plan.compact_map] = np.arange(plan.compact_map.size)
    return [_rows_as_real(compact, position[plan.row_of[:, j]]) for j in range(plan.top_k)]


def combine(slot_rows: list, gates=None, counter: PassCounter | None = None) -> np.ndarray:
    record(counter, "combine")
    return _weighted_sum(slot_rows, gates)


def unfused_unpermute_unpad(buffer, plan: RoutingPlan, gates=None, counter: PassCounter | None = None):
    gates = _check_buffer(buffer, plan, gates)
    return combine(unpermute(unpad(buffer, plan, counter), plan, counter), gates, counter)


def fused_unpermute_unpad(buffer, plan: RoutingPlan, gates=None, counter: PassCounter | None = None):
    """Drop padding and sum each token's expert outputs, weighted by ``gates``.

    ``gates=None`` means unit weights. Output is a real ``tokens x hidden``
    matrix at working precision.
    """
    gates = _check_buffer(buffer, plan, gates)
    record(counter, "fused_unpermute_unpad")
    return _weighted_sum([_rows_as_real(buffer, plan.row_of[:, j]) for j in range(plan.top_k)], gates)


# -- SwiGLU ----------------------------------------------------------------


def _sigmoid(x):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def silu(x):
    with np.errstate(over="ignore"):
        return x / (1.0 + np.exp(-x))


def _split_halves(h) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(h, QuantizedTensor):
        raise TypeError("SwiGLU consumes real (BF16-grid) activations, not FP8 codes")
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] % 2:
        raise ShapeError(f"SwiGLU input needs an even column count, got shape {h.shape}")
    ffn = h.shape[1] // 2
    return h[:, :ffn], h[:, ffn:]


def swiglu(h, counter: PassCounter | None = None) -> np.ndarray:
    """``silu(a) * b`` with ``a`` the first half of each row and ``b`` the second."""
    a, b = _split_halves(h)
    record(counter, "swiglu")
    return silu(a) * b


def unfused_swiglu_quant(h, layout: Layout = Layout.ROW, mode: ScaleMode = ScaleMode.POW2,
                         counter: PassCounter | None = None) -> QuantizedTensor:
    return quantize(swiglu(h, counter), layout, mode, counter)


def fused_swiglu_quant(h, layout: Layout = Layout.ROW, mode: ScaleMode = ScaleMode.POW2,
                       counter: PassCounter | None = None) -> QuantizedTensor:
    """SwiGLU and quantization in one sweep over 128-row chunks.

    The activation never exists as a full matrix; each chunk is activated
    and quantized before the next is read.
    """
    a, b = _split_halves(h)
    rows, ffn = a.shape
    if ffn % TILE:
        raise ShapeError(f"ffn width {ffn} is not a multiple of {TILE}")
    if layout is Layout.COL and rows % TILE:
        raise ShapeError(f"column-wise output needs rows divisible by {TILE}, got {rows}")
    record(counter, "fused_swiglu_quant")
    codes = np.empty((rows, ffn), dtype=np.uint8)
    scale_parts = []
    for start in range(0, rows, TILE):
        stop = min(start + TILE, rows)
        chunk = quantize(silu(a[start:stop]) * b[start:stop], layout, mode)
        codes[start:stop] = chunk.codes
        scale_parts.append(chunk.scales)
    if not scale_parts:
        return quantize(np.zeros((rows, ffn)), layout, mode)
    return QuantizedTensor(codes, np.concatenate(scale_parts, axis=0), layout, mode)


def swiglu_backward(h, dy, round_output: bool = True) -> np.ndarray:
    """Gradient of ``silu(a) * b`` w.r.t. ``h = [a | b]``.

    ``da = dy * b * silu'(a)`` with ``silu'(x) = s(x) * (1 + x * (1 - s(x)))``,
    ``db = dy * silu(a)``. Rounded to the BF16 grid unless ``round_output`` is off.
    """
    a, b = _split_halves(h)
    dy = np.asarray(dy, dtype=np.float64)
    if dy.shape != a.shape:
        raise ShapeError(f"dY shape {dy.shape} does not match activation shape {a.shape}")
    sig = _sigmoid(a)
    da = dy * b * (sig * (1.0 + a * (1.0 - sig)))
    db = dy * (a * sig)
    dh = np.concatenate([da, db], axis=1)
    return round_bf16(dh) if round_output else dh
