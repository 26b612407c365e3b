"""FP8 dataflow toolkit for mixture-of-experts layers.

Bit-exact E4M3 codec, 1x128 tile quantization with real or power-of-two
scales, naive and scaling-aware layout transposes, fused MoE data-movement
operators, and a precision-annotated simulator for one MoE layer.
"""

from fp8flow.codec import E4M3_MAX, decode_e4m3, encode_e4m3, round_bf16, shift_exponent
from fp8flow.counters import PassCounter
from fp8flow.errors import Fp8FlowError
from fp8flow.tile_quant import TILE, Layout, QuantizedTensor, ScaleMode, compute_scale, dequantize, quantize
from fp8flow.transpose import direct_transpose, double_quant_error, naive_transpose

__version__ = "0.1.0"

__all__ = [
    "E4M3_MAX", "TILE", "Fp8FlowError", "Layout", "PassCounter", "QuantizedTensor", "ScaleMode",
    "compute_scale", "decode_e4m3", "dequantize", "direct_transpose", "double_quant_error",
    "encode_e4m3", "naive_transpose", "quantize", "round_bf16", "shift_exponent",
]
