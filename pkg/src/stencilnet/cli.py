"""Command-line benchmarks, memory reports and oracle checks.

Every data command writes CSV to stdout with a fixed header; diagnostics go
to stderr.  Exit status is 0 on success and 1 on any error or failed check.
"""

from __future__ import annotations

import argparse
import csv
import logging
import statistics
import sys
import time

import numpy as np

from . import layers as L
from .model import ConfigError, infer, load_model, memory_report, seeded_input
from .model import infer_quantized, oracle_infer, oracle_infer_quantized, quantize_plan
from .params import ReductionOp, output_shape
from .verify import (FMA_RTOL, LAYER_KINDS, LayerCase, fill_case, check_float_case, check_quantized_case,
                     random_layer_case, run_case)

log = logging.getLogger("stencilnet")

TIMING_COLUMNS = ["bench", "target", "shape", "kernel", "p_max", "trials", "warmup",
                  "min_s", "median_s", "per_second", "macs", "timer", "fastest"]
MEMORY_COLUMNS = ["model", "dtype", "field", "value"]
VERIFY_COLUMNS = ["suite", "case", "cases", "passed", "failed"]

BENCH_LAYERS = {
    "conv3x3": lambda c, out: L.conv2d(3, 3, 1, out, "same"),
    "conv1x1": lambda c, out: L.conv2d(1, 1, 1, out),
    "dwconv3x3": lambda c, out: L.depthwise_conv(3, 3, 1, "same"),
    "group_conv3x3": lambda c, out: L.group_conv(3, 3, 1, 4, 4, "same"),
    "maxpool2x2": lambda c, out: L.maxpool(2, 2),
    "maxpool3x3": lambda c, out: L.maxpool(3, 3, 1, "same"),
    "avgpool": lambda c, out: L.avgpool(),
    "relu": lambda c, out: L.relu(),
    "batchnorm": lambda c, out: L.batchnorm_affine(),
    "add": lambda c, out: L.add(),
    "upsample2x": lambda c, out: L.upsample_nearest(2),
    "fc": lambda c, out: L.fully_connected(out),
}


def parse_shape(text: str) -> tuple[int, int, int]:
    try:
        h, w, c = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"shape must look like HxWxC, got {text!r}") from None
    if min(h, w, c) < 1:
        raise argparse.ArgumentTypeError(f"shape dimensions must be positive: {text!r}")
    return h, w, c


def parse_pmax(text: str) -> list[int]:
    vals = [int(v) for v in text.split(",") if v]
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"p_max values must be positive integers: {text!r}")
    return vals


def time_trials(fn, trials: int, warmup: int) -> list[float]:
    """Wall times (seconds, monotonic clock) of ``trials`` calls after ``warmup`` untimed ones."""
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(trials):
        t0 = time.perf_counter_ns()
        fn()
        times.append((time.perf_counter_ns() - t0) * 1e-9)
    return times


def _writer(columns):
    w = csv.DictWriter(sys.stdout, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    return w


def _timing_row(bench, target, shape, kernel, p_max, args, times, macs, fastest=""):
    best = min(times)
    return {"bench": bench, "target": target, "shape": "x".join(map(str, shape)), "kernel": kernel,
            "p_max": p_max, "trials": len(times), "warmup": args.warmup,
            "min_s": f"{best:.9f}", "median_s": f"{statistics.median(times):.9f}",
            "per_second": f"{1.0 / best:.3f}" if best > 0 else "inf", "macs": macs,
            "timer": "perf_counter_ns", "fastest": fastest}


def bench_layer_case(name: str, shape: tuple[int, int, int], out_channels: int | None,
                     seed: int = 0) -> LayerCase:
    layer = BENCH_LAYERS[name](shape[2], out_channels or shape[2])
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape).astype(np.float32)
    return fill_case(name, layer.bind(shape), layer.op, x, rng, layer)


def window_ops(params, op: ReductionOp, in_shape: tuple[int, int, int]) -> int:
    """Multiply-accumulates (or comparisons) for one layer; pointwise counts one per output."""
    p = params
    oh, ow, oc = output_shape(p, in_shape).hwc
    if op in (ReductionOp.FMA, ReductionOp.MAX):
        return oh * ow * oc * p.f_h * p.f_w * p.f_c
    return oh * ow * oc


def case_macs(case: LayerCase) -> int:
    return window_ops(case.params, case.op, case.in_shape)


def cmd_bench_layer(args) -> int:
    case = bench_layer_case(args.layer, args.shape, args.channels)
    vectorized = args.kernel == "vectorized"
    times = time_trials(lambda: run_case(case, vectorized, args.threads), args.trials, args.warmup)
    _writer(TIMING_COLUMNS).writerow(
        _timing_row("layer", args.layer, args.shape, args.kernel, args.threads, args, times, case_macs(case)))
    return 0


def cmd_bench_model(args) -> int:
    plan = load_model(args.config, args.weights, args.seed)
    x = seeded_input(plan.input_shape)
    vectorized = args.kernel == "vectorized"
    macs = sum(window_ops(s.params, s.layer.op, s.in_shape) for s in plan.steps)
    rows = []
    for p in args.pmax:
        times = time_trials(lambda: infer(plan, x, p, prefer_vectorized=vectorized), args.trials, args.warmup)
        rows.append(_timing_row("model", plan.name, plan.input_shape, args.kernel, p, args, times, macs))
    best = min(rows, key=lambda r: float(r["min_s"]))
    best["fastest"] = "yes"
    log.info("fastest p_max for %s: %s (%s frames/s)", plan.name, best["p_max"], best["per_second"])
    w = _writer(TIMING_COLUMNS)
    for r in rows:
        w.writerow(r)
    return 0


def cmd_report_memory(args) -> int:
    plan = load_model(args.config, args.weights, args.seed)
    report = memory_report(plan, args.dtype)
    w = _writer(MEMORY_COLUMNS)
    for key, value in report.rows():
        w.writerow({"model": plan.name, "dtype": args.dtype, "field": key, "value": value})
    return 0


def _verify_layers(args, quantized: bool) -> list[tuple[str, int, int]]:
    rng = np.random.default_rng(args.seed)
    results = []
    for kind in LAYER_KINDS:
        passed = 0
        for i in range(args.cases):
            case = random_layer_case(kind, rng)
            vectorized = i % 2 == 0
            if quantized:
                ok = check_quantized_case(case, rng, vectorized)
            else:
                ok, err = check_float_case(case, vectorized)
                if not ok:
                    log.error("%s case %d: relative error %.3g (%s on %s)", kind, i, err, case.params, case.in_shape)
            passed += ok
        results.append((kind, args.cases, passed))
    return results


def _verify_models(args, quantized: bool) -> list[tuple[str, int, int]]:
    results = []
    for name in args.models:
        plan = load_model(name, seed=args.seed)
        x = seeded_input(plan.input_shape)
        if quantized:
            qplan = quantize_plan(plan, x)
            xq = qplan.quantize_input(x)
            ok = np.array_equal(infer_quantized(qplan, xq).data, oracle_infer_quantized(qplan, xq))
        else:
            ref = oracle_infer(plan, x)
            err = np.abs(infer(plan, x).data - ref).max() / max(np.abs(ref).max(), 1e-30)
            ok = err <= FMA_RTOL
            log.info("%s: relative error %.3g", name, err)
        results.append((name, 1, int(ok)))
    return results


def cmd_verify(args) -> int:
    if args.suite == "layers":
        results = _verify_layers(args, quantized=False)
    elif args.suite == "quantized":
        results = _verify_layers(args, quantized=True) + _verify_models(args, quantized=True)
    else:
        results = _verify_models(args, quantized=False)
    w = _writer(VERIFY_COLUMNS)
    total = failed = 0
    for case, n, passed in results:
        w.writerow({"suite": args.suite, "case": case, "cases": n, "passed": passed, "failed": n - passed})
        total += n
        failed += n - passed
    w.writerow({"suite": args.suite, "case": "total", "cases": total, "passed": total - failed, "failed": failed})
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stencilnet", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def timing(p):
        p.add_argument("--kernel", choices=["reference", "vectorized"], default="vectorized")
        p.add_argument("--trials", type=int, default=100)
        p.add_argument("--warmup", type=int, default=3, help="untimed runs before measuring")

    def model_source(p):
        p.add_argument("--config", required=True, help="YAML config path or shipped model name")
        p.add_argument("--weights", help="float32 weight file (default: seeded weights)")
        p.add_argument("--seed", type=int, default=None, help="weight seed when no file is given")

    p = sub.add_parser("bench-layer", help="time one layer")
    p.add_argument("--layer", choices=sorted(BENCH_LAYERS), required=True)
    p.add_argument("--shape", type=parse_shape, required=True, help="input HxWxC")
    p.add_argument("--channels", type=int, default=None, help="output channels for conv/fc")
    p.add_argument("--threads", type=int, default=1)
    timing(p)
    p.set_defaults(func=cmd_bench_layer)

    p = sub.add_parser("bench-model", help="end-to-end inference rate per thread ceiling")
    model_source(p)
    p.add_argument("--pmax", type=parse_pmax, default=[1, 2, 4], help="comma-separated, e.g. 1,2,4")
    timing(p)
    p.set_defaults(func=cmd_bench_model)

    p = sub.add_parser("report-memory", help="memory accounting for a model")
    model_source(p)
    p.add_argument("--dtype", choices=["float", "uint8"], default="float")
    p.set_defaults(func=cmd_report_memory)

    p = sub.add_parser("verify", help="oracle-equivalence checks")
    p.add_argument("--suite", choices=["layers", "models", "quantized"], required=True)
    p.add_argument("--cases", type=int, default=20, help="random cases per layer kind")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--models", nargs="+", default=["resnet", "dscnn", "autoencoder", "mobilenet"])
    p.set_defaults(func=cmd_verify)
    return ap


def _configure_logging(verbose: bool) -> None:
    pkg = logging.getLogger("stencilnet")
    for h in list(pkg.handlers):
        pkg.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    pkg.addHandler(handler)
    pkg.setLevel(logging.DEBUG if verbose else logging.INFO)
    pkg.propagate = False


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:   # usage errors exit 1 like every other failure
        return 0 if exc.code == 0 else 1
    _configure_logging(args.verbose)
    if getattr(args, "trials", 1) < 1 or getattr(args, "warmup", 0) < 0:
        log.error("--trials must be >= 1 and --warmup >= 0")
        return 1
    try:
        return args.func(args)
    except (ConfigError, OSError, ValueError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
