"""Randomized oracle-equivalence cases for single layers and whole models."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import layers as L
from .engine import Pointwise, run_layer
from .kernels import choose_config
from .layout import BlockedTensor, PlainTensor, pack_activations, pack_weights, unpack_activations
from .oracle import oracle_layer, oracle_layer_quantized
from .params import LayerClass, LayerParams, ReductionOp, classify, output_shape
from .quantized import (QuantParams, pack_quantized_weights, quantize_array, run_layer_quantized)

FMA_RTOL = 1e-5
POINTWISE_RTOL = 1e-6

LAYER_KINDS = ("relu", "batchnorm", "add", "upsample", "depthwise", "maxpool", "avgpool",
               "group_conv", "overlap_group", "channel_max", "conv", "conv1x1", "fc")


@dataclass
class LayerCase:
    kind: str
    params: LayerParams
    op: ReductionOp
    x: np.ndarray                       # float32 (H, W, C)
    weights: np.ndarray | None = None   # [G][K][F_C][F_H][F_W]
    second: np.ndarray | None = None
    scale: np.ndarray | None = None
    shift: np.ndarray | None = None
    max_seed: float = -math.inf

    @property
    def in_shape(self) -> tuple[int, int, int]:
        return tuple(self.x.shape)

    @property
    def layer_class(self) -> LayerClass:
        return classify(self.params, self.in_shape)


def _dims(rng, lo=1, hi=10):
    return int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1))


def _window(rng, h, w, padding):
    fh, fw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    if padding == "valid":
        fh, fw = min(fh, h), min(fw, w)
    return fh, fw


def random_layer_case(kind: str, rng: np.random.Generator) -> LayerCase:
    """Draw one random instance of a layer kind (sizes span several channel blocks)."""
    h, w = _dims(rng)
    c = int(rng.integers(1, 41))
    stride = int(rng.integers(1, 3))
    padding = "same" if rng.random() < 0.5 else "valid"
    fh, fw = _window(rng, h, w, padding)
    if kind == "relu":
        layer = L.relu()
    elif kind == "batchnorm":
        layer = L.batchnorm_affine()
    elif kind == "add":
        layer = L.add()
    elif kind == "upsample":
        layer = L.upsample_nearest(int(rng.integers(1, 4)))
    elif kind == "depthwise":
        layer = L.depthwise_conv(fh, fw, stride, padding)
    elif kind == "maxpool":
        layer = L.maxpool(fh, fw, stride, padding)
    elif kind == "avgpool":
        layer = L.avgpool() if rng.random() < 0.3 else L.avgpool(min(fh, h), min(fw, w), stride)
    elif kind == "group_conv":
        cpg = int(rng.integers(1, 9))
        c = cpg * int(rng.integers(2, 7))
        layer = L.group_conv(fh, fw, stride, cpg, int(rng.integers(1, 9)), padding)
    elif kind == "conv":
        layer = L.conv2d(fh, fw, stride, int(rng.integers(1, 41)), padding)
    elif kind == "conv1x1":
        layer = L.conv2d(1, 1, 1, int(rng.integers(1, 41)))
    elif kind == "fc":
        h, w = _dims(rng, 1, 4)
        layer = L.fully_connected(int(rng.integers(1, 41)))
    elif kind in ("overlap_group", "channel_max"):
        # windows that slide along channels: S_C < F_C, or MAX across channels
        f_c = int(rng.integers(2, 6))
        s_c = int(rng.integers(1, f_c + 1))
        c = f_c + s_c * int(rng.integers(1, 8))
        k = int(rng.integers(1, 5)) if kind == "overlap_group" else 1
        params = LayerParams(min(fh, h), min(fw, w), f_c, stride, stride, s_c, k)
        op = ReductionOp.FMA if kind == "overlap_group" else ReductionOp.MAX
        return fill_case(kind, params, op, rng.standard_normal((h, w, c)).astype(np.float32), rng)
    else:
        raise ValueError(f"unknown layer kind {kind!r}")
    x = rng.standard_normal((h, w, c)).astype(np.float32)
    case = fill_case(kind, layer.bind((h, w, c)), layer.op, x, rng, layer)
    return case


def fill_case(kind, params, op, x, rng, layer=None) -> LayerCase:
    case = LayerCase(kind, params, op, x, max_seed=layer.max_seed if layer else -math.inf)
    c = x.shape[2]
    if op is ReductionOp.FMA:
        groups = output_shape(params, x.shape).groups
        shape = (groups, params.k, params.f_c, params.f_h, params.f_w)
        if layer is not None and not layer.learned:
            case.weights = np.full(shape, 1.0 / (params.f_h * params.f_w), np.float32)
        else:
            case.weights = rng.standard_normal(shape).astype(np.float32)
    elif op is ReductionOp.POINTWISE_FMA_BINARY:
        if layer.pointwise_mode == "add":
            case.second = rng.standard_normal(x.shape).astype(np.float32)
        else:
            case.scale = rng.standard_normal(c).astype(np.float32)
            case.shift = rng.standard_normal(c).astype(np.float32)
    return case


def oracle_for(case: LayerCase) -> np.ndarray:
    return oracle_layer(case.params, case.op, case.x, case.weights, second=case.second,
                        scale=case.scale, shift=case.shift, max_seed=case.max_seed)


def run_case(case: LayerCase, prefer_vectorized: bool = True, threads: int = 1,
             block: int = 16) -> np.ndarray:
    """Pack, run through the loop-nest driver, unpack."""
    params, op = case.params, case.op
    config = choose_config(params, case.in_shape[2], block)
    inp = pack_activations(PlainTensor(case.x), block)
    oh, ow, oc = output_shape(params, case.in_shape).hwc
    out = BlockedTensor.empty(oh, ow, oc, block, np.float32)
    operand = None
    if op is ReductionOp.FMA:
        operand = pack_weights(case.weights, config.c_b, config.f_cb)
    elif op is ReductionOp.POINTWISE_FMA_BINARY:
        if case.second is not None:
            operand = Pointwise("add", second=pack_activations(PlainTensor(case.second), block))
        else:
            operand = Pointwise("affine", scale=case.scale, shift=case.shift)
    run_layer(params, op, inp, operand, config, out, threads,
              prefer_vectorized=prefer_vectorized, max_seed=case.max_seed)
    return unpack_activations(out).data


def compare_float(case: LayerCase, got: np.ndarray, want: np.ndarray) -> tuple[bool, float]:
    """FMA: relative to the largest oracle magnitude.  MAX/upsample: exact."""
    if got.shape != want.shape:
        return False, math.inf
    if case.op in (ReductionOp.MAX, ReductionOp.UPSAMPLE_NEAREST):
        return bool(np.array_equal(got, want.astype(np.float32))), 0.0
    rtol = FMA_RTOL if case.op is ReductionOp.FMA else POINTWISE_RTOL
    scale = max(float(np.abs(want).max()), np.finfo(np.float32).tiny)
    err = float(np.abs(got.astype(np.float64) - want).max()) / scale
    return err <= rtol, err


def check_float_case(case: LayerCase, prefer_vectorized: bool = True, threads: int = 1):
    return compare_float(case, run_case(case, prefer_vectorized, threads), oracle_for(case))


# -- quantized ---------------------------------------------------------------------

def _random_q(rng) -> QuantParams:
    return QuantParams(float(rng.uniform(0.005, 0.05)), int(rng.integers(0, 256)))


def quantize_case(case: LayerCase, rng: np.random.Generator) -> dict:
    """uint8 operands and params for a float case; output params cover the true range."""
    in_q = _random_q(rng)
    xq = rng.integers(0, 256, case.x.shape).astype(np.uint8)
    q = {"x": xq, "in_q": in_q, "w_q": None, "wq": None, "second": None, "second_q": None}
    real = (xq.astype(np.float64) - in_q.zero_point) * in_q.scale
    if case.op is ReductionOp.FMA:
        q["w_q"] = QuantParams.from_range(case.weights.min(), case.weights.max())
        q["wq"] = quantize_array(case.weights, q["w_q"])
        wreal = (q["wq"].astype(np.float64) - q["w_q"].zero_point) * q["w_q"].scale
        ref = oracle_layer(case.params, case.op, real, wreal)
    elif case.op is ReductionOp.POINTWISE_FMA_BINARY:
        if case.second is not None:
            q["second_q"] = _random_q(rng)
            q["second"] = rng.integers(0, 256, case.x.shape).astype(np.uint8)
            sreal = (q["second"].astype(np.float64) - q["second_q"].zero_point) * q["second_q"].scale
            ref = real + sreal
        else:
            ref = real * case.scale.astype(np.float64) + case.shift.astype(np.float64)
    else:
        ref = None
    q["out_q"] = in_q if ref is None else QuantParams.from_range(ref.min(), ref.max())
    q["seed"] = 0 if case.max_seed == -math.inf else int(quantize_array(np.float64(case.max_seed), in_q))
    return q


def run_case_quantized(case: LayerCase, q: dict, prefer_vectorized: bool = True, threads: int = 1,
                       block: int = 16) -> np.ndarray:
    params, op = case.params, case.op
    config = choose_config(params, case.in_shape[2], block)
    inp = pack_activations(PlainTensor(q["x"]), block)
    oh, ow, oc = output_shape(params, case.in_shape).hwc
    out = BlockedTensor.empty(oh, ow, oc, block, np.uint8)
    operand = None
    if op is ReductionOp.FMA:
        operand = pack_quantized_weights(q["wq"], q["w_q"], config)
    elif op is ReductionOp.POINTWISE_FMA_BINARY:
        if q["second"] is not None:
            operand = Pointwise("add", second=pack_activations(PlainTensor(q["second"]), block))
        else:
            operand = Pointwise("affine", scale=case.scale.astype(np.float64),
                                shift=case.shift.astype(np.float64))
    run_layer_quantized(params, op, inp, operand, config, out, threads, in_q=q["in_q"],
                        out_q=q["out_q"], w_q=q["w_q"], second_q=q["second_q"],
                        max_seed=case.max_seed, prefer_vectorized=prefer_vectorized)
    return unpack_activations(out).data


def oracle_for_quantized(case: LayerCase, q: dict) -> np.ndarray:
    return oracle_layer_quantized(case.params, case.op, q["x"], q["wq"], in_q=q["in_q"],
                                  w_q=q["w_q"], out_q=q["out_q"], second=q["second"],
                                  second_q=q["second_q"], scale=case.scale, shift=case.shift,
                                  max_seed=q["seed"])


def check_quantized_case(case: LayerCase, rng: np.random.Generator, prefer_vectorized: bool = True,
                         threads: int = 1) -> bool:
    q = quantize_case(case, rng)
    got = run_case_quantized(case, q, prefer_vectorized, threads)
    return bool(np.array_equal(got, oracle_for_quantized(case, q)))
