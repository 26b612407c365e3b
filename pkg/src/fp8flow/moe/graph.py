"""Precision-annotated dataflow graphs for one MoE layer, forward and backward.

Four recipes are modelled:

``bf16``       everything on the BF16 grid, no FP8.
``blockwise``  FP8 only inside the grouped linears; each GEMM input is
               quantized (row- and column-wise in one kernel) on entry.
``dsv3``       FP8 dispatch with Q/DQ around the communication, FP8 GEMMs,
               and dequantize-transpose-requantize for Wgrad activations.
``fp8flow``    one quantize per pass at the layer entry; FP8 persists along
               the expert path, SwiGLU and dgrad epilogues quantize in-kernel,
               and Wgrad layouts come from the scaling-aware transpose.

A graph is a list of nodes over named tensors. Each tensor has a precision;
each node states the precision it expects on every input, which
``RecipeGraph.validate`` checks against the producer.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from fp8flow.errors import ConfigError, InvariantViolation
from fp8flow.tile_quant import TILE, ScaleMode

RECIPES = ("bf16", "blockwise", "dsv3", "fp8flow")


class Precision(enum.Enum):
    FP8 = "fp8+scales"
    BF16 = "bf16-grid"
    WORKING = "working"


class Cast(enum.Enum):
    NONE = "none"
    QUANTIZE = "explicit-quantize"
    DEQUANTIZE = "explicit-dequantize"
    FUSED_QUANTIZE = "fused-quantize"


@dataclass(frozen=True)
class ModelDims:
    tokens: int
    hidden: int
    ffn: int
    num_experts: int
    top_k: int
    pad_multiple: int = 16
    tile_len: int = TILE

    def __post_init__(self):
        if self.tile_len != TILE:
            raise ConfigError(f"tile_len is fixed at {TILE}")
        if self.tokens < 1:
            raise ConfigError("tokens must be >= 1")
        if self.hidden < TILE or self.hidden % TILE or self.ffn < TILE or self.ffn % TILE:
            raise ConfigError(f"hidden and ffn must be positive multiples of {TILE}")
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigError(f"top_k={self.top_k} must lie in [1, num_experts={self.num_experts}]")
        if self.pad_multiple < 1:
            raise ConfigError("pad_multiple must be positive")

    def as_dict(self) -> dict:
        return {
            "tokens": self.tokens,
            "hidden": self.hidden,
            "ffn": self.ffn,
            "num_experts": self.num_experts,
            "top_k": self.top_k,
            "pad_multiple": self.pad_multiple,
            "tile_len": self.tile_len,
        }


@dataclass(frozen=True)
class TensorSpec:
    """``rows``/``cols`` are symbols: T tokens, P padded buffer rows, H hidden,
    F ffn, 2F gate+up width. ``grouped`` marks per-expert column-wise operands
    whose rows are padded to 128 per expert."""

    name: str
    precision: Precision
    rows: str
    cols: str
    layout: str | None = None
    scale_mode: ScaleMode | None = None
    grouped: bool = False
    boundary: str | None = None


@dataclass(frozen=True)
class Node:
    name: str
    op: str
    phase: str  # "fwd" | "bwd"
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    in_precisions: tuple[Precision, ...]
    cast: Cast = Cast.NONE
    attrs: dict = field(default_factory=dict, hash=False, compare=False)


@dataclass(frozen=True)
class CastTally:
    explicit_quantize: int
    explicit_dequantize: int
    fused_quantize: int

    @property
    def explicit(self) -> int:
        return self.explicit_quantize + self.explicit_dequantize

    def as_dict(self) -> dict:
        return {
            "explicit_quantize": self.explicit_quantize,
            "explicit_dequantize": self.explicit_dequantize,
            "explicit_total": self.explicit,
            "fused_quantize": self.fused_quantize,
        }


@dataclass
class RecipeGraph:
    recipe_id: str
    dims: ModelDims
    scale_mode: ScaleMode | None
    tensors: dict[str, TensorSpec]
    nodes: list[Node]
    external_inputs: tuple[str, ...]
    external_outputs: tuple[str, ...]

    def phase(self, phase: str) -> list[Node]:
        return [n for n in self.nodes if n.phase == phase]

    def producer(self, tensor: str) -> Node | None:
        for n in self.nodes:
            if tensor in n.outputs:
                return n
        return None

    def consumers(self, tensor: str) -> list[Node]:
        return [n for n in self.nodes if tensor in n.inputs]

    def edges(self):
        """``(producer, consumer, tensor)`` for every internal data edge."""
        for n in self.nodes:
            for t in n.inputs:
                p = self.producer(t)
                if p is not None:
                    yield p, n, t

    def saved_tensors(self) -> list[str]:
        """Tensors produced in the forward pass and read in the backward pass."""
        saved = []
        for name in self.tensors:
            p = self.producer(name)
            if p is not None and p.phase == "fwd" and any(c.phase == "bwd" for c in self.consumers(name)):
                saved.append(name)
        return saved

    def interior_tensors(self, precision: Precision) -> list[str]:
        """Tensors of ``precision`` produced by one node and consumed by another."""
        return [
            name
            for name, spec in self.tensors.items()
            if spec.precision is precision and self.producer(name) is not None and self.consumers(name)
        ]

    def validate(self) -> "RecipeGraph":
        produced = set(self.external_inputs)
        for phase in ("fwd", "bwd"):
            for n in self.phase(phase):
                if len(n.in_precisions) != len(n.inputs):
                    raise InvariantViolation(f"{n.name}: one input precision per input required")
                for t, want in zip(n.inputs, n.in_precisions):
                    if t not in self.tensors:
                        raise InvariantViolation(f"{n.name}: unknown tensor {t}")
                    if t not in produced:
                        raise InvariantViolation(f"{n.name}: {t} read before it is produced")
                    have = self.tensors[t].precision
                    if have is not want:
                        raise InvariantViolation(
                            f"{n.name}: input {t} is {have.value}, node expects {want.value}"
                        )
                for t in n.outputs:
                    if t in produced:
                        raise InvariantViolation(f"{t} produced twice")
                    produced.add(t)
        missing = [t for t in self.external_outputs if t not in produced]
        if missing:
            raise InvariantViolation(f"outputs never produced: {missing}")
        return self

    def cast_table(self) -> list[dict]:
        return [
            {"node": n.name, "phase": n.phase, "op": n.op, "cast": n.cast.value, "tensor": n.inputs[0]}
            for n in self.nodes
            if n.cast is not Cast.NONE
        ]


def count_casts(graph: RecipeGraph) -> CastTally:
    return CastTally(
        explicit_quantize=sum(n.cast is Cast.QUANTIZE for n in graph.nodes),
        explicit_dequantize=sum(n.cast is Cast.DEQUANTIZE for n in graph.nodes),
        fused_quantize=sum(n.cast is Cast.FUSED_QUANTIZE for n in graph.nodes),
    )


class _Builder:
    """Small helper that keeps tensor specs and node wiring in one place."""

    def __init__(self, recipe_id: str, dims: ModelDims, mode: ScaleMode | None):
        self.recipe_id = recipe_id
        self.dims = dims
        self.mode = mode
        self.tensors: dict[str, TensorSpec] = {}
        self.nodes: list[Node] = []
        self.phase = "fwd"

    def tensor(self, name, precision, rows, cols, layout=None, grouped=False, boundary=None, mode=None) -> str:
        if precision is Precision.FP8:
            mode = mode or self.mode
        else:
            mode = None
        self.tensors[name] = TensorSpec(name, precision, rows, cols, layout, mode, grouped, boundary)
        return name

    def node(self, name, op, inputs, outputs, cast=Cast.NONE, **attrs):
        ins = tuple(inputs)
        self.nodes.append(
            Node(
                name=name,
                op=op,
                phase=self.phase,
                inputs=ins,
                outputs=tuple(outputs),
                in_precisions=tuple(self.tensors[t].precision for t in ins),
                cast=cast,
                attrs=attrs,
            )
        )

    def fp8(self, name, rows, cols, layout="row", grouped=False, mode=None):
        return self.tensor(name, Precision.FP8, rows, cols, layout, grouped, mode=mode)

    def bf16(self, name, rows, cols, boundary=None):
        return self.tensor(name, Precision.BF16, rows, cols, boundary=boundary)


FP8_BOUNDARY_1 = "gemm1-output->activation"
FP8_BOUNDARY_2 = "gemm2-output->combine"


def _externals(b: _Builder, weight_precision: Precision):
    b.bf16("x", "T", "H")
    b.bf16("dout", "T", "H")
    for w, (r, c) in {"w1": ("H", "2F"), "w2": ("F", "H")}.items():
        b.tensor(f"{w}_fprop", weight_precision, r, c, layout="col" if weight_precision is Precision.FP8 else None)
        b.tensor(f"{w}_dgrad", weight_precision, c, r, layout="col" if weight_precision is Precision.FP8 else None)
    b.bf16("out", "T", "H")
    b.bf16("dx", "T", "H")
    b.tensor("dw1", Precision.WORKING, "H", "2F")
    b.tensor("dw2", Precision.WORKING, "F", "H")


def _build_bf16(b: _Builder):
    _externals(b, Precision.BF16)
    b.bf16("x_d", "T", "H"), b.bf16("xp", "P", "H"), b.bf16("h", "P", "2F")
    b.bf16("a", "P", "F"), b.bf16("y", "P", "H")
    b.node("dispatch", "dispatch", ["x"], ["x_d"])
    b.node("permute_pad", "permute_pad", ["x_d"], ["xp"])
    b.node("gemm1_fprop", "gemm_fprop", ["xp", "w1_fprop"], ["h"])
    b.node("swiglu", "swiglu", ["h"], ["a"])
    b.node("gemm2_fprop", "gemm_fprop", ["a", "w2_fprop"], ["y"])
    b.node("combine", "combine", ["y"], ["out"])
    b.phase = "bwd"
    b.bf16("dout_d", "T", "H"), b.bf16("dy", "P", "H"), b.bf16("da", "P", "F")
    b.bf16("dh", "P", "2F"), b.bf16("dxp", "P", "H")
    b.node("dispatch_grad", "dispatch", ["dout"], ["dout_d"])
    b.node("permute_pad_grad", "permute_pad", ["dout_d"], ["dy"])
    b.node("gemm2_dgrad", "gemm_dgrad", ["dy", "w2_dgrad"], ["da"], gated=True)
    b.node("gemm2_wgrad", "gemm_wgrad", ["a", "dy"], ["dw2"], gated=True)
    b.node("swiglu_bwd", "swiglu_bwd", ["h", "da"], ["dh"])
    b.node("gemm1_dgrad", "gemm_dgrad", ["dh", "w1_dgrad"], ["dxp"], gated=False)
    b.node("gemm1_wgrad", "gemm_wgrad", ["xp", "dh"], ["dw1"], gated=False)
    b.node("unpermute_unpad_grad", "unpermute_unpad", ["dxp"], ["dx"])


def _build_blockwise(b: _Builder):
    _externals(b, Precision.FP8)
    b.bf16("x_d", "T", "H"), b.bf16("xp", "P", "H"), b.bf16("h", "P", "2F")
    b.bf16("a", "P", "F"), b.bf16("y", "P", "H")
    b.fp8("xp_q", "P", "H"), b.fp8("xp_col", "P", "H", "col", grouped=True)
    b.fp8("a_q", "P", "F"), b.fp8("a_col", "P", "F", "col", grouped=True)
    b.node("dispatch", "dispatch", ["x"], ["x_d"])
    b.node("permute_pad", "permute_pad", ["x_d"], ["xp"])
    b.node("quantize_gemm1_input", "quantize", ["xp"], ["xp_q", "xp_col"], Cast.QUANTIZE, layouts=("row", "col"))
    b.node("gemm1_fprop", "gemm_fprop", ["xp_q", "w1_fprop"], ["h"])
    b.node("swiglu", "swiglu", ["h"], ["a"])
    b.node("quantize_gemm2_input", "quantize", ["a"], ["a_q", "a_col"], Cast.QUANTIZE, layouts=("row", "col"))
    b.node("gemm2_fprop", "gemm_fprop", ["a_q", "w2_fprop"], ["y"])
    b.node("combine", "combine", ["y"], ["out"])
    b.phase = "bwd"
    b.bf16("dout_d", "T", "H"), b.bf16("dy", "P", "H"), b.bf16("da", "P", "F")
    b.bf16("dh", "P", "2F"), b.bf16("dxp", "P", "H")
    b.fp8("dy_q", "P", "H"), b.fp8("dy_col", "P", "H", "col", grouped=True)
    b.fp8("dh_q", "P", "2F"), b.fp8("dh_col", "P", "2F", "col", grouped=True)
    b.node("dispatch_grad", "dispatch", ["dout"], ["dout_d"])
    b.node("permute_pad_grad", "permute_pad", ["dout_d"], ["dy"])
    b.node("quantize_gemm2_grad", "quantize", ["dy"], ["dy_q", "dy_col"], Cast.QUANTIZE, layouts=("row", "col"))
    b.node("gemm2_dgrad", "gemm_dgrad", ["dy_q", "w2_dgrad"], ["da"], gated=True)
    b.node("gemm2_wgrad", "gemm_wgrad", ["a_col", "dy_col"], ["dw2"], gated=True)
    b.node("swiglu_bwd", "swiglu_bwd", ["h", "da"], ["dh"])
    b.node("quantize_gemm1_grad", "quantize", ["dh"], ["dh_q", "dh_col"], Cast.QUANTIZE, layouts=("row", "col"))
    b.node("gemm1_dgrad", "gemm_dgrad", ["dh_q", "w1_dgrad"], ["dxp"], gated=False)
    b.node("gemm1_wgrad", "gemm_wgrad", ["xp_col", "dh_col"], ["dw1"], gated=False)
    b.node("unpermute_unpad_grad", "unpermute_unpad", ["dxp"], ["dx"])


def _build_dsv3(b: _Builder):
    _externals(b, Precision.FP8)
    # communication casts use power-of-two scales, GEMM-input casts real scales
    b.fp8("x_q", "T", "H", mode=ScaleMode.POW2), b.fp8("x_qd", "T", "H", mode=ScaleMode.POW2)
    b.bf16("x_d", "T", "H"), b.bf16("xp", "P", "H"), b.fp8("xp_q", "P", "H")
    b.bf16("h", "P", "2F"), b.bf16("a", "P", "F"), b.fp8("a_q", "P", "F"), b.bf16("y", "P", "H")
    b.node("quantize_dispatch", "quantize", ["x"], ["x_q"], Cast.QUANTIZE, layouts=("row",))
    b.node("dispatch", "dispatch", ["x_q"], ["x_qd"])
    b.node("dequantize_dispatch", "dequantize", ["x_qd"], ["x_d"], Cast.DEQUANTIZE)
    b.node("permute_pad", "permute_pad", ["x_d"], ["xp"])
    b.node("quantize_gemm1_input", "quantize", ["xp"], ["xp_q"], Cast.QUANTIZE, layouts=("row",))
    b.node("gemm1_fprop", "gemm_fprop", ["xp_q", "w1_fprop"], ["h"])
    b.node("swiglu", "swiglu", ["h"], ["a"])
    b.node("quantize_gemm2_input", "quantize", ["a"], ["a_q"], Cast.QUANTIZE, layouts=("row",))
    b.node("gemm2_fprop", "gemm_fprop", ["a_q", "w2_fprop"], ["y"])
    b.node("combine", "combine", ["y"], ["out"])
    b.phase = "bwd"
    b.fp8("dout_q", "T", "H", mode=ScaleMode.POW2), b.fp8("dout_qd", "T", "H", mode=ScaleMode.POW2)
    b.bf16("dout_d", "T", "H")
    b.bf16("dy", "P", "H"), b.fp8("dy_q", "P", "H"), b.fp8("dy_col", "P", "H", "col", grouped=True)
    b.bf16("da", "P", "F"), b.bf16("a_dq", "P", "F"), b.fp8("a_col", "P", "F", "col", grouped=True)
    b.bf16("dh", "P", "2F"), b.fp8("dh_q", "P", "2F"), b.fp8("dh_col", "P", "2F", "col", grouped=True)
    b.bf16("dxp", "P", "H"), b.bf16("xp_dq", "P", "H"), b.fp8("xp_col", "P", "H", "col", grouped=True)
    b.node("quantize_dispatch_grad", "quantize", ["dout"], ["dout_q"], Cast.QUANTIZE, layouts=("row",))
    b.node("dispatch_grad", "dispatch", ["dout_q"], ["dout_qd"])
    b.node("dequantize_dispatch_grad", "dequantize", ["dout_qd"], ["dout_d"], Cast.DEQUANTIZE)
    b.node("permute_pad_grad", "permute_pad", ["dout_d"], ["dy"])
    b.node("quantize_gemm2_grad", "quantize", ["dy"], ["dy_q", "dy_col"], Cast.QUANTIZE, layouts=("row", "col"))
    b.node("gemm2_dgrad", "gemm_dgrad", ["dy_q", "w2_dgrad"], ["da"], gated=True)
    b.node("dequantize_a_wgrad", "dequantize", ["a_q"], ["a_dq"], Cast.DEQUANTIZE)
    b.node("requantize_a_wgrad", "quantize", ["a_dq"], ["a_col"], Cast.QUANTIZE, layouts=("col",))
    b.node("gemm2_wgrad", "gemm_wgrad", ["a_col", "dy_col"], ["dw2"], gated=True)
    b.node("swiglu_bwd", "swiglu_bwd", ["h", "da"], ["dh"])
    b.node("quantize_gemm1_grad", "quantize", ["dh"], ["dh_q", "dh_col"], Cast.QUANTIZE, layouts=("row", "col"))
    b.node("gemm1_dgrad", "gemm_dgrad", ["dh_q", "w1_dgrad"], ["dxp"], gated=False)
    b.node("dequantize_xp_wgrad", "dequantize", ["xp_q"], ["xp_dq"], Cast.DEQUANTIZE)
    b.node("requantize_xp_wgrad", "quantize", ["xp_dq"], ["xp_col"], Cast.QUANTIZE, layouts=("col",))
    b.node("gemm1_wgrad", "gemm_wgrad", ["xp_col", "dh_col"], ["dw1"], gated=False)
    b.node("unpermute_unpad_grad", "unpermute_unpad", ["dxp"], ["dx"])


def _build_fp8flow(b: _Builder):
    _externals(b, Precision.FP8)
    b.fp8("x_q", "T", "H"), b.fp8("x_qd", "T", "H"), b.fp8("xp", "P", "H")
    b.bf16("h", "P", "2F", boundary=FP8_BOUNDARY_1)
    b.fp8("a", "P", "F")
    b.bf16("y", "P", "H", boundary=FP8_BOUNDARY_2)
    b.node("quantize_entry", "quantize", ["x"], ["x_q"], Cast.QUANTIZE, layouts=("row",))
    b.node("dispatch", "dispatch", ["x_q"], ["x_qd"])
    b.node("permute_pad", "permute_pad", ["x_qd"], ["xp"])
    b.node("gemm1_fprop", "gemm_fprop", ["xp", "w1_fprop"], ["h"])
    b.node("swiglu_quant", "swiglu_quant", ["h"], ["a"], Cast.FUSED_QUANTIZE)
    b.node("gemm2_fprop", "gemm_fprop", ["a", "w2_fprop"], ["y"])
    b.node("combine", "combine", ["y"], ["out"])
    b.phase = "bwd"
    b.fp8("dout_q", "T", "H"), b.fp8("dout_qd", "T", "H"), b.fp8("dy", "P", "H")
    b.fp8("dh", "P", "2F"), b.fp8("dxp", "P", "H")
    b.fp8("a_col", "P", "F", "col", grouped=True), b.fp8("dy_col", "P", "H", "col", grouped=True)
    b.fp8("dh_col", "P", "2F", "col", grouped=True), b.fp8("xp_col", "P", "H", "col", grouped=True)
    b.node("quantize_grad_entry", "quantize", ["dout"], ["dout_q"], Cast.QUANTIZE, layouts=("row",))
    b.node("dispatch_grad", "dispatch", ["dout_q"], ["dout_qd"])
    b.node("permute_pad_grad", "permute_pad", ["dout_qd"], ["dy"])
    b.node("gemm2_dgrad_swiglu_bwd_quant", "gemm_dgrad_swiglu_bwd_quant", ["dy", "w2_dgrad", "h"], ["dh"],
           Cast.FUSED_QUANTIZE, gated=True)
    b.node("transpose_a", "direct_transpose", ["a"], ["a_col"])
    b.node("transpose_dy", "direct_transpose", ["dy"], ["dy_col"])
    b.node("gemm2_wgrad", "gemm_wgrad", ["a_col", "dy_col"], ["dw2"], gated=True)
    b.node("transpose_dh", "direct_transpose", ["dh"], ["dh_col"])
    b.node("transpose_xp", "direct_transpose", ["xp"], ["xp_col"])
    b.node("gemm1_wgrad", "gemm_wgrad", ["xp_col", "dh_col"], ["dw1"], gated=False)
    b.node("gemm1_dgrad_quant", "gemm_dgrad", ["dh", "w1_dgrad"], ["dxp"], Cast.FUSED_QUANTIZE, gated=False)
    b.node("unpermute_unpad_grad", "unpermute_unpad", ["dxp"], ["dx"])


_BUILDERS = {
    "bf16": (_build_bf16, None),
    "blockwise": (_build_blockwise, ScaleMode.REAL),
    "dsv3": (_build_dsv3, ScaleMode.REAL),
    "fp8flow": (_build_fp8flow, ScaleMode.POW2),
}


def build_recipe(recipe_id: str, dims: ModelDims) -> RecipeGraph:
    if recipe_id not in _BUILDERS:
        raise ConfigError(f"unknown recipe {recipe_id!r}; choose from {', '.join(RECIPES)}")
    if not isinstance(dims, ModelDims):
        raise ConfigError("dims must be a ModelDims")
    build, mode = _BUILDERS[recipe_id]
    b = _Builder(recipe_id, dims, mode)
    build(b)
    graph = RecipeGraph(
        recipe_id=recipe_id,
        dims=dims,
        scale_mode=mode,
        tensors=b.tensors,
        nodes=b.nodes,
        external_inputs=("x", "dout", "w1_fprop", "w1_dgrad", "w2_fprop", "w2_dgrad"),
        external_outputs=("out", "dx", "dw1", "dw2"),
    )
    return graph.validate()
