"""Execute recipe graphs, compare against an FP64 oracle, and model memory."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fp8flow.codec import round_bf16
from fp8flow.counters import PassCounter
from fp8flow.errors import ConfigError, MissingActivations, ShapeError
from fp8flow.fused_ops import RoutingPlan, build_routing, fused_permute_pad, fused_unpermute_unpad, swiglu, swiglu_backward
from fp8flow.moe.graph import RECIPES, ModelDims, Precision, RecipeGraph, TensorSpec, build_recipe, count_casts
from fp8flow.moe.numerics import FP8, ExactTensor, pad_to, tile_ceil, tiled_gemm
from fp8flow.rng import SeededStream, check_seed, trial_seed
from fp8flow.tile_quant import TILE, Layout, QuantizedTensor, ScaleMode


@dataclass
class MoEInputs:
    x: np.ndarray  # tokens x hidden, BF16 grid
    w1: np.ndarray  # experts x hidden x 2ffn, master weights
    w2: np.ndarray  # experts x ffn x hidden
    w_router: np.ndarray  # hidden x experts
    dout: np.ndarray  # tokens x hidden, BF16 grid

    def routing(self, dims: ModelDims) -> RoutingPlan:
        """Routing from FP64 logits; every recipe shares it."""
        return build_routing(self.x @ self.w_router, dims.top_k, dims.pad_multiple)


def make_inputs(dims: ModelDims, seed: int) -> MoEInputs:
    """Seeded draws, in order: x, W1, W2, router, dOut."""
    rs = SeededStream(seed)
    t, h, f, e = dims.tokens, dims.hidden, dims.ffn, dims.num_experts
    x = round_bf16(rs.normal((t, h)))
    w1 = rs.normal((e, h, 2 * f), scale=h**-0.5)
    w2 = rs.normal((e, f, h), scale=f**-0.5)
    wr = rs.normal((h, e), scale=h**-0.5)
    dout = round_bf16(rs.normal((t, h)))
    return MoEInputs(x, w1, w2, wr, dout)


def check_inputs(dims: ModelDims, x, w1, w2, dout=None) -> None:
    t, h, f, e = dims.tokens, dims.hidden, dims.ffn, dims.num_experts
    want = {"x": (t, h), "w1": (e, h, 2 * f), "w2": (e, f, h)}
    got = {"x": np.shape(x), "w1": np.shape(w1), "w2": np.shape(w2)}
    if dout is not None:
        want["dout"], got["dout"] = (t, h), np.shape(dout)
    for name in want:
        if tuple(got[name]) != want[name]:
            raise ShapeError(f"{name} has shape {got[name]}, dims imply {want[name]}")


def row_gates(plan: RoutingPlan) -> np.ndarray:
    """Gate of every buffer row (0 for padding)."""
    g = np.zeros(plan.padded_rows)
    live = plan.compact_map
    g[live] = plan.gates[plan.inverse_map[live], plan.slot_map[live]]
    return g


def _rows(x, s: slice):
    return x[s] if isinstance(x, np.ndarray) else x.row_slice(s.start, s.stop)


def _expert_slices(plan: RoutingPlan) -> list[slice]:
    return [plan.expert_rows(e) for e in range(plan.num_experts)]


# -- weights ---------------------------------------------------------------


def prepare_weights(graph: RecipeGraph, w1: np.ndarray, w2: np.ndarray, numerics=FP8) -> dict:
    """Quantize (or BF16-round) the master weights once for the whole run.

    FP8 operands are column-wise along the GEMM K dimension: ``W`` itself for
    Fprop, and the transpose of a row-wise quantization of ``W`` for Dgrad.
    """
    out = {}
    fp8 = graph.tensors["w1_fprop"].precision is Precision.FP8
    for name, w in (("w1", w1), ("w2", w2)):
        if fp8:
            mode = graph.scale_mode
            out[f"{name}_fprop"] = [numerics.quantize(we, Layout.COL, mode) for we in w]
            out[f"{name}_dgrad"] = [numerics.quantize(we, Layout.ROW, mode).T for we in w]
        else:
            rounded = [numerics.round(we) for we in w]
            out[f"{name}_fprop"] = rounded
            out[f"{name}_dgrad"] = [we.T for we in rounded]
    return out


# -- interpreter -------------------------------------------------------------


class _Run:
    def __init__(self, graph: RecipeGraph, plan: RoutingPlan, numerics, counter: PassCounter | None):
        self.graph = graph
        self.plan = plan
        self.nm = numerics
        self.counter = counter
        self.mode = graph.scale_mode
        self.slices = _expert_slices(plan)
        self.gates = row_gates(plan)

    def grouped(self, x, cast=None) -> list:
        """Per-expert row blocks zero-padded to a multiple of 128 rows."""
        parts = []
        for s in self.slices:
            part = _rows(x, s)
            total = tile_ceil(s.stop - s.start)
            parts.append(pad_to(part, total) if isinstance(part, np.ndarray) else part.pad_rows(total))
        return parts if cast is None else [cast(p) for p in parts]

    def grouped_gemm(self, act, weights: list, gated: bool) -> np.ndarray:
        parts = []
        for e, s in enumerate(self.slices):
            part = tiled_gemm(_rows(act, s), weights[e])
            if gated:
                part = part * self.gates[s][:, None]
            parts.append(part)
        return np.concatenate(parts, axis=0)

    def execute(self, node, env: dict) -> None:
        nm, plan = self.nm, self.plan
        out_spec = self.graph.tensors[node.outputs[0]]
        mode = out_spec.scale_mode or self.mode
        ins = [env[t] for t in node.inputs]
        op = node.op
        if op == "quantize":
            x = ins[0]
            outs = []
            for layout in node.attrs["layouts"]:
                if layout == "row":
                    outs.append(nm.quantize(x, Layout.ROW, mode))
                else:
                    outs.append(self.grouped(x, lambda p: nm.quantize(p, Layout.COL, mode)))
        elif op == "dequantize":
            outs = [nm.round(nm.dequantize(ins[0]))]
        elif op == "dispatch":
            outs = [ins[0]]
        elif op == "permute_pad":
            outs = [fused_permute_pad(ins[0], plan)]
        elif op == "gemm_fprop":
            outs = [nm.round(self.grouped_gemm(ins[0], ins[1], gated=False))]
        elif op == "swiglu":
            outs = [nm.round(swiglu(ins[0]))]
        elif op == "swiglu_quant":
            outs = [nm.swiglu_quant(ins[0], mode)]
        elif op == "combine":
            outs = [nm.round(fused_unpermute_unpad(ins[0], plan, plan.gates))]
        elif op == "gemm_dgrad":
            acc = self.grouped_gemm(ins[0], ins[1], gated=node.attrs["gated"])
            fused = node.cast.value == "fused-quantize"
            outs = [nm.quantize(acc, Layout.ROW, mode) if fused else nm.round(acc)]
        elif op == "gemm_dgrad_swiglu_bwd_quant":
            da = self.grouped_gemm(ins[0], ins[1], gated=node.attrs["gated"])
            outs = [nm.quantize(swiglu_backward(ins[2], da, round_output=False), Layout.ROW, mode)]
        elif op == "swiglu_bwd":
            outs = [nm.round(swiglu_backward(ins[0], ins[1], round_output=False))]
        elif op == "direct_transpose":
            outs = [self.grouped(ins[0], nm.direct_transpose)]
        elif op == "gemm_wgrad":
            acts, grads = (v if isinstance(v, list) else self.grouped(v) for v in ins)
            gates = self.grouped(self.gates[:, None]) if node.attrs["gated"] else None
            outs = [
                np.stack(
                    [
                        tiled_gemm(acts[e].T, grads[e], None if gates is None else gates[e][:, 0])
                        for e in range(plan.num_experts)
                    ]
                )
            ]
        elif op == "unpermute_unpad":
            outs = [nm.round(fused_unpermute_unpad(ins[0], plan, None))]
        else:
            raise ConfigError(f"unknown op {op!r} in node {node.name}")
        if self.counter is not None:
            self.counter.record(node.name)
        env.update(zip(node.outputs, outs))


@dataclass
class ForwardState:
    out: np.ndarray
    saved: dict
    weights: dict
    plan: RoutingPlan
    numerics: object = FP8


@dataclass
class Gradients:
    dx: np.ndarray
    dw1: np.ndarray
    dw2: np.ndarray


def run_forward(graph: RecipeGraph, x, w1, w2, plan: RoutingPlan, numerics=FP8,
                counter: PassCounter | None = None, store_activations: bool = True) -> ForwardState:
    check_inputs(graph.dims, x, w1, w2)
    if plan.num_tokens != graph.dims.tokens or plan.num_experts != graph.dims.num_experts:
        raise ConfigError("routing plan does not match the graph dims")
    weights = prepare_weights(graph, np.asarray(w1, float), np.asarray(w2, float), numerics)
    env = {"x": np.asarray(x, dtype=np.float64), **weights}
    run = _Run(graph, plan, numerics, counter)
    for node in graph.phase("fwd"):
        run.execute(node, env)
    saved = {t: env[t] for t in graph.saved_tensors()} if store_activations else {}
    return ForwardState(env["out"], saved, weights, plan, numerics)


def run_backward(graph: RecipeGraph, dout, state: ForwardState, counter: PassCounter | None = None) -> Gradients:
    needed = graph.saved_tensors()
    missing = [t for t in needed if t not in state.saved]
    if missing:
        raise MissingActivations(f"forward did not store {', '.join(missing)}")
    dout = np.asarray(dout, dtype=np.float64)
    if dout.shape != (graph.dims.tokens, graph.dims.hidden):
        raise ShapeError(f"dOut has shape {dout.shape}, expected {(graph.dims.tokens, graph.dims.hidden)}")
    env = {"dout": dout, **state.weights, **state.saved}
    run = _Run(graph, state.plan, state.numerics, counter)
    for node in graph.phase("bwd"):
        run.execute(node, env)
    return Gradients(env["dx"], env["dw1"], env["dw2"])


# -- oracle ----------------------------------------------------------------


def _oracle_forward(x, w1, w2, plan: RoutingPlan):
    slices = _expert_slices(plan)
    xp = fused_permute_pad(x, plan)
    h = np.concatenate([tiled_gemm(xp[s], w1[e]) for e, s in enumerate(slices)])
    a = swiglu(h)
    y = np.concatenate([tiled_gemm(a[s], w2[e]) for e, s in enumerate(slices)])
    return fused_unpermute_unpad(y, plan, plan.gates), (xp, h, a)


def oracle_forward(dims: ModelDims, x, w1, w2, plan: RoutingPlan) -> np.ndarray:
    """Layer output in float64 with no quantization or rounding."""
    check_inputs(dims, x, w1, w2)
    return _oracle_forward(*(np.asarray(a, dtype=np.float64) for a in (x, w1, w2)), plan)[0]


@dataclass
class OracleResult:
    out: np.ndarray
    grads: Gradients


def oracle_run(dims: ModelDims, x, w1, w2, dout, plan: RoutingPlan) -> OracleResult:
    """Same dataflow in float64 with no quantization and no grid rounding."""
    check_inputs(dims, x, w1, w2, dout)
    x, w1, w2, dout = (np.asarray(a, dtype=np.float64) for a in (x, w1, w2, dout))
    slices = _expert_slices(plan)
    g = row_gates(plan)

    def pad(v, s):
        return pad_to(v[s], tile_ceil(s.stop - s.start))

    out, (xp, h, a) = _oracle_forward(x, w1, w2, plan)

    dy = fused_permute_pad(dout, plan)
    da = np.concatenate([tiled_gemm(dy[s], w2[e].T) * g[s][:, None] for e, s in enumerate(slices)])
    dh = swiglu_backward(h, da, round_output=False)
    dxp = np.concatenate([tiled_gemm(dh[s], w1[e].T) for e, s in enumerate(slices)])
    dx = fused_unpermute_unpad(dxp, plan, None)
    dw2 = np.stack([tiled_gemm(pad(a, s).T, pad(dy, s), pad(g[:, None], s)[:, 0]) for s in slices])
    dw1 = np.stack([tiled_gemm(pad(xp, s).T, pad(dh, s)) for s in slices])
    return OracleResult(out, Gradients(dx, dw1, dw2))


# -- byte model ------------------------------------------------------------

BYTES_PER_ELEMENT = {Precision.FP8: 1, Precision.BF16: 2, Precision.WORKING: 4}
SCALE_BYTES = {ScaleMode.REAL: 4, ScaleMode.POW2: 1}


def _dim(symbol: str, dims: ModelDims, plan: RoutingPlan) -> int:
    return {
        "T": dims.tokens,
        "P": plan.padded_rows,
        "H": dims.hidden,
        "F": dims.ffn,
        "2F": 2 * dims.ffn,
    }[symbol]


def spec_bytes(spec: TensorSpec, dims: ModelDims, plan: RoutingPlan) -> int:
    """Closed-form storage size of one tensor under its recipe precision."""
    cols = _dim(spec.cols, dims, plan)
    if spec.grouped:
        rows = int(sum(tile_ceil(int(n)) for n in plan.padded_counts))
    else:
        rows = _dim(spec.rows, dims, plan)
    elements = rows * cols
    nbytes = elements * BYTES_PER_ELEMENT[spec.precision]
    if spec.precision is Precision.FP8:
        nbytes += (elements // TILE) * SCALE_BYTES[spec.scale_mode]
    return nbytes


def activation_bytes(graph: RecipeGraph, plan: RoutingPlan) -> int:
    return sum(spec_bytes(graph.tensors[t], graph.dims, plan) for t in graph.saved_tensors())


def stored_bytes(graph: RecipeGraph, saved: dict) -> int:
    """Byte size summed over the tensors a forward run actually kept."""
    total = 0
    for name, value in saved.items():
        spec = graph.tensors[name]
        for part in value if isinstance(value, list) else [value]:
            if isinstance(part, QuantizedTensor):
                total += part.codes.size + part.scales.size * SCALE_BYTES[part.scale_mode]
            elif isinstance(part, ExactTensor):
                total += part.values.size * BYTES_PER_ELEMENT[spec.precision]
            else:
                total += part.size * BYTES_PER_ELEMENT[spec.precision]
    return total


# -- error statistics --------------------------------------------------------


def rel_rms(est: np.ndarray, ref: np.ndarray) -> float:
    den = float(np.linalg.norm(ref))
    num = float(np.linalg.norm(np.asarray(est) - ref))
    if den == 0.0:
        return 0.0 if num == 0.0 else float("inf")
    return num / den


def max_rel(est: np.ndarray, ref: np.ndarray) -> float:
    den = float(np.max(np.abs(ref))) if np.size(ref) else 0.0
    num = float(np.max(np.abs(np.asarray(est) - ref))) if np.size(ref) else 0.0
    if den == 0.0:
        return 0.0 if num == 0.0 else float("inf")
    return num / den


@dataclass
class TrialErrors:
    output: dict
    dgrad: dict
    dw1_rel_rms: list[float]
    dw2_rel_rms: list[float]
    dw1_max_rel: list[float]
    dw2_max_rel: list[float]

    @property
    def wgrad_rel_rms(self) -> float:
        return float(np.mean(self.dw1_rel_rms + self.dw2_rel_rms))


def compare(out, grads: Gradients, ref: OracleResult) -> TrialErrors:
    e = ref.grads.dw1.shape[0]
    return TrialErrors(
        output={"rel_rms": rel_rms(out, ref.out), "max_rel": max_rel(out, ref.out)},
        dgrad={"rel_rms": rel_rms(grads.dx, ref.grads.dx), "max_rel": max_rel(grads.dx, ref.grads.dx)},
        dw1_rel_rms=[rel_rms(grads.dw1[i], ref.grads.dw1[i]) for i in range(e)],
        dw2_rel_rms=[rel_rms(grads.dw2[i], ref.grads.dw2[i]) for i in range(e)],
        dw1_max_rel=[max_rel(grads.dw1[i], ref.grads.dw1[i]) for i in range(e)],
        dw2_max_rel=[max_rel(grads.dw2[i], ref.grads.dw2[i]) for i in range(e)],
    )


# -- reports -----------------------------------------------------------------


@dataclass
class RecipeReport:
    recipe_id: str
    explicit_quantize: int
    explicit_dequantize: int
    fused_quant_count: int
    activation_bytes: int
    stored_bytes: int
    pass_counts: dict
    trials: list[TrialErrors] = field(default_factory=list)

    @property
    def explicit_cast_count(self) -> int:
        return self.explicit_quantize + self.explicit_dequantize

    def mean(self, key: str) -> float:
        if key == "wgrad":
            return float(np.mean([t.wgrad_rel_rms for t in self.trials]))
        if key in ("dw1", "dw2"):
            return float(np.mean([np.mean(getattr(t, f"{key}_rel_rms")) for t in self.trials]))
        return float(np.mean([getattr(t, key)["rel_rms"] for t in self.trials]))

    def as_dict(self) -> dict:
        def mean_of(values):
            return float(np.mean(values))

        def per_expert(attr):
            return [float(v) for v in np.mean([getattr(t, attr) for t in self.trials], axis=0)]

        return {
            "recipe": self.recipe_id,
            "explicit_quantize": self.explicit_quantize,
            "explicit_dequantize": self.explicit_dequantize,
            "explicit_cast_count": self.explicit_cast_count,
            "fused_quant_count": self.fused_quant_count,
            "activation_bytes": self.activation_bytes,
            "pass_counts": self.pass_counts,
            "errors": {
                "output": {
                    "rel_rms": self.mean("output"),
                    "max_rel": mean_of([t.output["max_rel"] for t in self.trials]),
                },
                "dgrad": {
                    "rel_rms": self.mean("dgrad"),
                    "max_rel": mean_of([t.dgrad["max_rel"] for t in self.trials]),
                },
                "wgrad": {
                    "rel_rms": self.mean("wgrad"),
                    "dw1_rel_rms": per_expert("dw1_rel_rms"),
                    "dw2_rel_rms": per_expert("dw2_rel_rms"),
                    "dw1_max_rel": per_expert("dw1_max_rel"),
                    "dw2_max_rel": per_expert("dw2_max_rel"),
                },
                "per_trial_rel_rms": {
                    "output": [t.output["rel_rms"] for t in self.trials],
                    "wgrad": [t.wgrad_rel_rms for t in self.trials],
                },
            },
        }


@dataclass
class SimReport:
    dims: ModelDims
    seed: int
    trials: int
    recipes: dict[str, RecipeReport]

    def as_dict(self) -> dict:
        return {
            "dims": self.dims.as_dict(),
            "seed": self.seed,
            "trials": self.trials,
            "recipes": {k: v.as_dict() for k, v in self.recipes.items()},
        }


def measure(graphs, seed: int, trials: int = 1, numerics=FP8) -> SimReport:
    """Run every graph on ``trials`` seeded inputs and aggregate the statistics.

    ``graphs`` is one ``RecipeGraph`` or a list sharing the same dims. Trial
    ``i`` uses seed ``seed + i``; cast tallies, bytes and pass counts come
    from trial 0.
    """
    graphs = [graphs] if isinstance(graphs, RecipeGraph) else list(graphs)
    if not graphs:
        raise ConfigError("nothing to measure")
    dims = graphs[0].dims
    if any(g.dims != dims for g in graphs):
        raise ConfigError("all graphs in one report must share dims")
    check_seed(seed)
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    reports = {}
    for g in graphs:
        tally = count_casts(g)
        reports[g.recipe_id] = RecipeReport(g.recipe_id, tally.explicit_quantize, tally.explicit_dequantize,
                                            tally.fused_quantize, 0, 0, {})
    for i in range(trials):
        inputs = make_inputs(dims, trial_seed(seed, i))
        plan = inputs.routing(dims)
        ref = oracle_run(dims, inputs.x, inputs.w1, inputs.w2, inputs.dout, plan)
        for g in graphs:
            counter = PassCounter()
            state = run_forward(g, inputs.x, inputs.w1, inputs.w2, plan, numerics, counter)
            fwd_nodes = len(counter.by_op)
            grads = run_backward(g, inputs.dout, state, counter)
            rep = reports[g.recipe_id]
            if i == 0:
                rep.activation_bytes = activation_bytes(g, plan)
                rep.stored_bytes = stored_bytes(g, state.saved)
                rep.pass_counts = {"forward": fwd_nodes, "backward": len(counter.by_op) - fwd_nodes,
                                   "total": counter.passes}
            rep.trials.append(compare(state.out, grads, ref))
    return SimReport(dims, check_seed(seed), trials, reports)


def standard_dims() -> ModelDims:
    return ModelDims(tokens=512, hidden=256, ffn=512, num_experts=8, top_k=2)


def all_recipes(dims: ModelDims) -> list[RecipeGraph]:
    return [build_recipe(r, dims) for r in RECIPES]
