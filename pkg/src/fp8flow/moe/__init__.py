"""MoE layer dataflow simulator: recipe graphs, interpreter, oracle, byte model."""

from fp8flow.moe.graph import (
    RECIPES,
    Cast,
    CastTally,
    ModelDims,
    Node,
    Precision,
    RecipeGraph,
    TensorSpec,
    build_recipe,
    count_casts,
)
from fp8flow.moe.numerics import EXACT, FP8, ExactNumerics, ExactTensor, Fp8Numerics, tiled_gemm
from fp8flow.moe.sim import (
    ForwardState,
    Gradients,
    MoEInputs,
    OracleResult,
    RecipeReport,
    SimReport,
    activation_bytes,
    make_inputs,
    measure,
    oracle_forward,
    oracle_run,
    run_backward,
    run_forward,
    standard_dims,
)

__all__ = [
    "RECIPES", "Cast", "CastTally", "ModelDims", "Node", "Precision", "RecipeGraph", "TensorSpec",
    "build_recipe", "count_casts", "EXACT", "FP8", "ExactNumerics", "ExactTensor", "Fp8Numerics",
    "tiled_gemm", "ForwardState", "Gradients", "MoEInputs", "OracleResult", "RecipeReport", "SimReport",
    "activation_bytes", "make_inputs", "measure", "oracle_forward", "oracle_run", "run_backward", "run_forward", "standard_dims",
]
