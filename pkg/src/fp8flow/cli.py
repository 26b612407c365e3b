"""``fp8flow`` command line.

Exit status: 0 success, 1 invalid input or configuration (one-line
diagnostic on stderr), 2 internal invariant violation or failed self-test.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
import time
from pathlib import Path

import numpy as np

from fp8flow import codec, report, samples, tensorfile
from fp8flow.counters import PassCounter
from fp8flow.errors import ConfigError, Fp8FlowError, InvariantViolation
from fp8flow.moe import RECIPES, ModelDims, build_recipe, count_casts, measure
from fp8flow.rng import DISTRIBUTIONS, SEED_MASK, SeededStream, check_seed, trial_seed
from fp8flow.tile_quant import TILE, Layout, ScaleMode, dequantize, quantize
from fp8flow.transpose import ErrorStats, direct_transpose, double_quant_error, naive_transpose, underflow_count


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _seed(text: str) -> int:
    try:
        return check_seed(int(text, 0))
    except (ValueError, ConfigError):
        raise argparse.ArgumentTypeError(f"seed must be an integer in [0, {SEED_MASK}]") from None


def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _common(p: argparse.ArgumentParser, out_help: str = "write the report here instead of stdout") -> None:
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--out", type=Path, help=out_help)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fp8flow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("quantize", help="quantize a .npy matrix or a seeded draw into a tensor file")
    _common(p, "tensor file to write (required)")
    p.add_argument("--input", type=Path, help="2-D .npy array; omit to draw a seeded matrix")
    p.add_argument("--rows", type=_positive, default=256)
    p.add_argument("--cols", type=_positive, default=256)
    p.add_argument("--dist", choices=DISTRIBUTIONS, default="normal")
    p.add_argument("--layout", choices=("row", "col"), default="row")
    p.add_argument("--mode", choices=("real", "pow2"), default="pow2")
    p.add_argument("--report", type=Path, help="write the report here instead of stdout")

    p = sub.add_parser("transpose", help="convert a row-wise tensor file to column-wise")
    _common(p, "tensor file to write (required)")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--method", choices=("naive", "direct"), default="direct")
    p.add_argument("--timing", action="store_true", help="add wall-clock seconds (not reproducible)")
    p.add_argument("--report", type=Path, help="write the report here instead of stdout")

    p = sub.add_parser("dq-error", help="seeded double-quantization error sweep")
    _common(p)
    p.add_argument("--dist", choices=DISTRIBUTIONS + ("all",), default="normal")
    p.add_argument("--rows", type=_positive, nargs="+", default=[512])
    p.add_argument("--cols", type=_positive, nargs="+", default=[512])
    p.add_argument("--mode", choices=("real", "pow2"), default="real")
    p.add_argument("--path", choices=("naive", "direct"), default="naive")
    p.add_argument("--trials", type=_positive, default=10)

    p = sub.add_parser("casts", help="explicit and fused cast tally of a recipe graph")
    _common(p)
    p.add_argument("--recipe", choices=RECIPES, required=True)
    _dims_args(p)

    p = sub.add_parser("moe-sim", help="simulate the MoE layer under each recipe")
    _common(p)
    p.add_argument("--recipe", choices=RECIPES + ("all",), default="all")
    p.add_argument("--trials", type=_positive, default=1)
    _dims_args(p)

    p = sub.add_parser("selftest", help="exhaustive codec checks and idempotence properties")
    _common(p)
    p.add_argument("--tiles", type=_positive, default=2000, help="seeded tiles per idempotence case")
    return parser


def _dims_args(p):
    p.add_argument("--tokens", type=_positive, default=512)
    p.add_argument("--hidden", type=_positive, default=256)
    p.add_argument("--ffn", type=_positive, default=512)
    p.add_argument("--experts", type=_positive, default=8)
    p.add_argument("--top-k", type=_positive, default=2)


def _dims(a) -> ModelDims:
    return ModelDims(tokens=a.tokens, hidden=a.hidden, ffn=a.ffn, num_experts=a.experts, top_k=a.top_k)


def _tensor_info(q, blob: bytes) -> dict:
    return {
        "rows": q.rows,
        "cols": q.cols,
        "layout": q.layout.value,
        "scale_mode": q.scale_mode.value,
        "file_bytes": len(blob),
        "sha256": hashlib.sha256(blob).hexdigest(),
    }


def _need_out(a) -> Path:
    if a.out is None:
        raise ConfigError(f"{a.command} needs --out for the tensor file")
    return a.out


# -- subcommands -------------------------------------------------------------


def cmd_quantize(a):
    out = _need_out(a)
    if a.input is not None:
        try:
            x = np.load(a.input, allow_pickle=False)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read {a.input}: {exc}") from None
        source = {"input": str(a.input)}
    else:
        x = SeededStream(a.seed).draw(a.dist, (a.rows, a.cols))
        source = {"dist": a.dist, "rows": a.rows, "cols": a.cols, "seed": a.seed}
    q = quantize(x, Layout(a.layout), ScaleMode(a.mode))
    blob = tensorfile.to_bytes(q)
    out.write_bytes(blob)
    err = ErrorStats.of(dequantize(q) - np.asarray(x, dtype=np.float64))
    config = {**source, "layout": a.layout, "mode": a.mode}
    result = {"tensor": _tensor_info(q, blob), "error": err.as_dict()}
    rows = [{**_tensor_info(q, blob), **{f"error_{k}": v for k, v in err.as_dict().items()}}]
    return config, result, rows


def cmd_transpose(a):
    out = _need_out(a)
    q = tensorfile.read_tensor(a.input)
    counter = PassCounter()
    t0 = time.perf_counter()
    if a.method == "naive":
        res, underflow = naive_transpose(q, counter), None
    else:
        res, underflow = direct_transpose(q, counter), underflow_count(q)
    elapsed = time.perf_counter() - t0
    blob = tensorfile.to_bytes(res)
    out.write_bytes(blob)
    drift = ErrorStats.of(dequantize(res) - dequantize(q))
    config = {"input_sha256": hashlib.sha256(Path(a.input).read_bytes()).hexdigest(), "method": a.method}
    result = {
        "method": a.method,
        "tensor": _tensor_info(res, blob),
        "drift": drift.as_dict(),
        "underflow": underflow,
        "passes": counter.passes,
    }
    if a.timing:
        result["timing"] = {"seconds": elapsed}
    row = {"method": a.method, "passes": counter.passes, "underflow": "" if underflow is None else underflow}
    row.update({f"drift_{k}": v for k, v in drift.as_dict().items()})
    return config, result, [row]


def cmd_dq_error(a):
    mode = ScaleMode(a.mode)
    dists = DISTRIBUTIONS if a.dist == "all" else (a.dist,)
    bad = [n for n in a.rows + a.cols if n % TILE]
    if bad:
        raise ConfigError(f"rows and cols must be multiples of {TILE}, got {bad[0]}")
    if a.mode == "real" and a.path == "direct":
        raise ConfigError("the direct path needs --mode pow2")
    rows = []
    case = 0
    for dist in dists:
        for r in a.rows:
            for c in a.cols:
                errs, drifts, maxes, under = [], [], [], []
                for t in range(a.trials):
                    # one independent stream per (case, trial)
                    x = SeededStream(trial_seed(a.seed, case * a.trials + t)).draw(dist, (r, c))
                    res = double_quant_error(x, mode, a.path)
                    errs.append(res.error.rms)
                    drifts.append(res.drift.rms)
                    maxes.append(res.error.max_abs)
                    if res.underflow is not None:
                        under.append(res.underflow)
                case += 1
                rows.append(
                    {
                        "dist": dist,
                        "rows": r,
                        "cols": c,
                        "mode": a.mode,
                        "path": a.path,
                        "trials": a.trials,
                        "mean_error_rms": float(np.mean(errs)),
                        "mean_drift_rms": float(np.mean(drifts)),
                        "max_error_abs": float(np.max(maxes)),
                        "mean_underflow": float(np.mean(under)) if under else None,
                    }
                )
    config = {"dist": a.dist, "rows": a.rows, "cols": a.cols, "mode": a.mode, "path": a.path,
              "trials": a.trials, "seed": a.seed}
    return config, {"rows": rows}, [{k: ("" if v is None else v) for k, v in r.items()} for r in rows]


def cmd_casts(a):
    dims = _dims(a)
    g = build_recipe(a.recipe, dims)
    tally = count_casts(g).as_dict()
    result = {"recipe": a.recipe, **tally, "placements": g.cast_table()}
    return {"recipe": a.recipe, "dims": dims.as_dict()}, result, [{"recipe": a.recipe, **tally}]


def cmd_moe_sim(a):
    dims = _dims(a)
    recipes = RECIPES if a.recipe == "all" else (a.recipe,)
    sim = measure([build_recipe(r, dims) for r in recipes], a.seed, a.trials).as_dict()
    rows = []
    for rid, rep in sim["recipes"].items():
        err = rep["errors"]
        rows.append(
            {
                "recipe": rid,
                "explicit_quantize": rep["explicit_quantize"],
                "explicit_dequantize": rep["explicit_dequantize"],
                "fused_quant_count": rep["fused_quant_count"],
                "activation_bytes": rep["activation_bytes"],
                "output_rel_rms": err["output"]["rel_rms"],
                "output_max_rel": err["output"]["max_rel"],
                "dgrad_rel_rms": err["dgrad"]["rel_rms"],
                "wgrad_rel_rms": err["wgrad"]["rel_rms"],
            }
        )
    config = {"recipe": a.recipe, "trials": a.trials, "seed": a.seed, "dims": dims.as_dict()}
    return config, sim, rows


def selftest_checks(seed: int, tiles: int) -> list[dict]:
    checks = []

    def check(name, ok, detail):
        checks.append({"name": name, "passed": bool(ok), "detail": detail})

    # decode from the bit fields, evaluated independently of the codec table
    bad = 0
    for c in range(256):
        s, e, m = (c >> 7) & 1, (c >> 3) & 0xF, c & 7
        if e == 15 and m == 7:
            bad += not np.isnan(codec.decode_e4m3(c))
            continue
        want = (-1.0) ** s * (2.0 ** (e - 7) * (1 + m / 8) if e else 2.0**-6 * m / 8)
        bad += codec.decode_e4m3(c) != (want if want != 0 else 0.0)
    check("decode_all_codes", bad == 0, f"{bad} of 256 codes decode wrongly")

    codes = np.array([c for c in range(256) if c & 0x7F != 0x7F], dtype=np.uint8)
    back = codec.encode_e4m3(codec.decode_e4m3(codes))
    check("encode_decode_identity", np.array_equal(back, codes), f"{int(np.sum(back != codes))} mismatches")

    grid = codec.DECODE_TABLE[:0x7F]
    lower = np.arange(0x7E)
    got = codec.encode_e4m3((grid[:-1] + grid[1:]) / 2)
    want = np.where(lower % 2 == 0, lower, lower + 1)
    check("ties_to_even", np.array_equal(got, want), f"{int(np.sum(got != want))} midpoints misrounded")

    ks, allc = np.meshgrid(np.arange(21), np.arange(256), indexing="ij")
    finite = ~codec.is_nan_code(allc)
    shifted = codec.shift_exponent(allc.astype(np.uint8), ks)
    ref = codec.encode_e4m3(np.ldexp(codec.DECODE_TABLE[allc[finite]], -ks[finite]))
    check("shift_is_requantize", np.array_equal(shifted[finite], ref), "shift_exponent vs re-encode, k <= 20")

    x = samples.tile_batch(seed, tiles)
    for mode in ScaleMode:
        for layout in Layout:
            data = x if layout is Layout.ROW else np.ascontiguousarray(x.T)
            q = quantize(data, layout, mode)
            again = quantize(dequantize(q), layout, mode)
            check(f"idempotence_{mode.value}_{layout.value}", again == q, f"{tiles} tiles")

    y = samples.aligned_magnitudes(seed, 256, 256)
    q = quantize(y, Layout.ROW, ScaleMode.POW2)
    exact = np.array_equal(dequantize(direct_transpose(q)), dequantize(q))
    check("direct_transpose_exact", exact and underflow_count(q) == 0, "256x256 aligned-magnitude input")
    return checks


def cmd_selftest(a):
    checks = selftest_checks(a.seed, a.tiles)
    passed = all(c["passed"] for c in checks)
    return {"seed": a.seed, "tiles": a.tiles}, {"passed": passed, "checks": checks}, checks


COMMANDS = {
    "quantize": cmd_quantize,
    "transpose": cmd_transpose,
    "dq-error": cmd_dq_error,
    "casts": cmd_casts,
    "moe-sim": cmd_moe_sim,
    "selftest": cmd_selftest,
}


def _emit(text: str, path: Path | None) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        path.write_text(text)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        config, result, rows = COMMANDS[args.command](args)
        timing = result.pop("timing", None)
        env = report.envelope(args.command, config, result)
        if timing is not None:
            env["timing"] = timing
        text = report.to_json(env) if args.format == "json" else report.to_csv(rows)
        dest = getattr(args, "report", None) if args.command in ("quantize", "transpose") else args.out
        _emit(text, dest)
        if args.command == "selftest" and not result["passed"]:
            failed = [c["name"] for c in result["checks"] if not c["passed"]]
            print(f"fp8flow: selftest failed: {', '.join(failed)}", file=sys.stderr)
            return 2
        return 0
    except InvariantViolation as exc:
        print(f"fp8flow: internal invariant violated: {exc}", file=sys.stderr)
        return 2
    except (Fp8FlowError, OSError, ValueError) as exc:
        msg = " ".join(str(exc).split())
        print(f"fp8flow: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
