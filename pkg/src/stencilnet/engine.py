"""The single loop nest that executes every layer.

Loop order: output-channel blocks (groups step G_b, filters step K_b, in
parallel), then input-channel blocks (step F_Cb), then output rows, then
output columns (step O_wb).  Everything inside that is the kernel's job.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .instrument import COUNTERS
from .kernels import KernelConfig, SourceKind, TileIO, TileSource, select_kernel
from .layout import BlockedTensor, PackedWeights, ceil_div, pad_spatial
from .params import LayerParams, OutputShape, ReductionOp, ShapeError, output_shape


class ContractError(ValueError):
    """Arguments to the driver are inconsistent with each other."""


@dataclass
class Pointwise:
    """Second operand of a pointwise layer: another tensor (``add``) or
    per-channel ``scale``/``shift`` vectors (``affine``)."""

    mode: str
    second: BlockedTensor | None = None
    scale: np.ndarray | None = None
    shift: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.mode == "add":
            if self.second is None:
                raise ContractError("add needs a second tensor")
        elif self.mode == "affine":
            if self.scale is None or self.shift is None:
                raise ContractError("affine needs scale and shift")
        else:
            raise ContractError(f"unknown pointwise mode {self.mode!r}")


@dataclass
class QuantBinding:
    """Integer-path constants for one layer (filled in by the quantized module).

    ``requantize`` maps a float64 accumulator-derived array to uint8 values.
    """

    in_zero_point: int
    in_scale: float
    multiplier: float                   # FMA: in_scale * w_scale / out_scale; pointwise: 1 / out_scale
    requantize: Callable[[np.ndarray], np.ndarray]
    second_zero_point: int = 0
    second_scale: float = 1.0


def output_blocks(groups: int, k: int, config: KernelConfig, out_channels: int) -> list[int]:
    """Output-channel block indices in loop-nest order.

    When the G/K split tiles the channel block exactly this is the nested
    ``for g step G_b: for k step K_b`` walk; otherwise blocks are flat.
    """
    c_b = config.c_b
    clean = groups == 1 or k % c_b == 0 or (config.k_b == k and c_b % k == 0)
    if not clean:
        return list(range(ceil_div(out_channels, c_b)))
    blocks = []
    for g in range(0, groups, config.g_b):
        for kk in range(0, k, config.k_b):
            blocks.append((g * k + kk) // c_b)
    return blocks


def _sources(params: LayerParams, op: ReductionOp, inp: BlockedTensor, shape: OutputShape,
             config: KernelConfig, ob: int, weights, pointwise, quant) -> tuple[list[TileSource], np.ndarray | None]:
    c_b, f_cb = config.c_b, config.f_cb
    k = params.k
    oc = ob * c_b + np.arange(c_b)
    valid_t = oc < shape.channels
    g = np.where(valid_t, oc // k, oc[0] // k)
    mask = None if valid_t.all() else valid_t
    n_ib = ceil_div(params.f_c, f_cb)
    last_channel = inp.padded_channels - 1
    srcs = []
    for ib in range(n_ib):
        ii = np.arange(f_cb)
        valid_ii = ib * f_cb + ii < params.f_c
        fc = ib * f_cb + ii
        if op is ReductionOp.MAX:
            fc = np.where(valid_ii, fc, ib * f_cb)
        chans = np.minimum(g[None, :] * params.s_c + fc[:, None], last_channel)
        blk_idx, lane_idx = chans // c_b, chans % c_b
        if (chans == chans[:, :1]).all() and (blk_idx == blk_idx[0, 0]).all() \
                and (lane_idx[:, 0] == lane_idx[0, 0] + ii).all():
            kind = SourceKind.DENSE
        elif f_cb == 1 and (blk_idx == blk_idx[0, 0]).all() and (lane_idx[0] == np.arange(c_b)).all():
            kind = SourceKind.LANEWISE
        else:
            kind = SourceKind.GATHER
        src = TileSource(
            inp=inp.data, kind=kind, f_h=params.f_h, f_w=params.f_w, s_h=params.s_h,
            s_w=params.s_w, f_cb=f_cb, c_b=c_b, blk=int(blk_idx[0, 0]), lane0=int(lane_idx[0, 0]),
            blk_idx=blk_idx, lane_idx=lane_idx, upsample=params.upsample,
            macs_per_column=int(valid_t.sum()) * int(valid_ii.sum()) * params.f_h * params.f_w,
        )
        if op is ReductionOp.FMA:
            src.weights = weights.data[ob, ib]
        if op is ReductionOp.POINTWISE_FMA_BINARY:
            src.pointwise_mode = pointwise.mode
            if pointwise.mode == "add":
                src.second = pointwise.second.data
            else:
                lanes = slice(ob * c_b, (ob + 1) * c_b)
                src.scale = _lane_vector(pointwise.scale, inp.padded_channels)[lanes]
                src.shift = _lane_vector(pointwise.shift, inp.padded_channels)[lanes]
        if quant is not None:
            src.in_offset = quant.in_zero_point
            src.in_scale = quant.in_scale
            src.second_offset = quant.second_zero_point
            src.second_scale = quant.second_scale
        srcs.append(src)
    return srcs, mask


def _lane_vector(v: np.ndarray, padded: int) -> np.ndarray:
    out = np.zeros(padded, dtype=np.float64 if v.dtype == np.float64 else np.float32)
    out[: v.shape[0]] = v
    return out


def _validate(params, op, inp, weights, config, out, quant) -> OutputShape:
    if op.needs_operand and weights is None:
        raise ContractError(f"{op.name} needs an operand")
    if not op.needs_operand and weights is not None:
        raise ContractError(f"{op.name} takes no operand")
    try:
        shape = output_shape(params, inp.shape)
    except ShapeError as exc:
        raise ContractError(str(exc)) from exc
    if out.shape != shape.hwc:
        raise ContractError(f"output buffer is {out.shape}, layer produces {shape.hwc}")
    if not (inp.block == out.block == config.c_b):
        raise ContractError(
            f"block mismatch: input {inp.block}, output {out.block}, kernel C_b {config.c_b}")
    want = np.uint8 if quant is not None else np.float32
    if inp.data.dtype != want or out.data.dtype != want:
        raise ContractError(f"expected {np.dtype(want).name} activations")
    if op is ReductionOp.FMA:
        if not isinstance(weights, PackedWeights):
            raise ContractError("FMA needs PackedWeights")
        dims = (weights.groups, weights.filters_per_group, weights.filter_channels,
                weights.filter_height, weights.filter_width)
        need = (shape.groups, params.k, params.f_c, params.f_h, params.f_w)
        if dims != need:
            raise ContractError(f"weights are [G,K,F_C,F_H,F_W]={dims}, layer needs {need}")
        if weights.out_block != config.c_b or weights.in_block != config.f_cb:
            raise ContractError("weights were packed for a different kernel config")
    elif op is ReductionOp.MAX:
        if params.k != 1:
            raise ContractError("MAX layers have K = 1")
    elif op is ReductionOp.POINTWISE_FMA_BINARY:
        if (params.f_h, params.f_w, params.f_c, params.k, params.s_h, params.s_w) != (1,) * 6:
            raise ContractError("pointwise layers use a 1x1x1 window with unit strides")
        if params.has_padding:
            raise ContractError("pointwise layers take no padding")
        if not isinstance(weights, Pointwise):
            raise ContractError("pointwise op needs a Pointwise operand")
        if weights.mode == "add" and weights.second.shape != inp.shape:
            raise ContractError(f"add operands differ: {inp.shape} vs {weights.second.shape}")
    return shape


def run_layer(params: LayerParams, op: ReductionOp, inp: BlockedTensor,
              weights: PackedWeights | Pointwise | None, config: KernelConfig,
              out: BlockedTensor, threads: int = 1, *, prefer_vectorized: bool = True,
              max_seed: float = -np.inf, quant: QuantBinding | None = None) -> None:
    """Compute one layer into the pre-allocated ``out``.

    ``max_seed`` is the value MAX tiles start from (negative infinity for
    pooling, zero for ReLU).  ``quant`` switches to the uint8/int32 path.
    """
    shape = _validate(params, op, inp, weights, config, out, quant)
    if params.has_padding:
        if op is ReductionOp.MAX:
            fill = 0 if quant is not None else -np.inf
        else:
            fill = quant.in_zero_point if quant is not None else 0.0
        inp = pad_spatial(inp, params.pad_top, params.pad_bottom, params.pad_left,
                          params.pad_right, fill)

    blocks = output_blocks(shape.groups, params.k, config, shape.channels)
    variants = {w: select_kernel(op, w, prefer_vectorized, config.o_wb).fn
                for w in range(1, config.o_wb + 1)}
    o_h, o_w, o_wb = shape.height, shape.width, config.o_wb

    if quant is None:
        acc_dtype = np.float32
        seed = max_seed if op is ReductionOp.MAX else 0
    elif op is ReductionOp.FMA:
        acc_dtype, seed = np.int32, 0
    elif op is ReductionOp.POINTWISE_FMA_BINARY:
        acc_dtype, seed = np.float64, 0
    else:
        acc_dtype, seed = np.uint8, max_seed
    if quant is not None and op is ReductionOp.FMA:
        mult = quant.multiplier
        convert = lambda acc: quant.requantize(acc.astype(np.float64) * mult)
    elif quant is not None and op is ReductionOp.POINTWISE_FMA_BINARY:
        mult = quant.multiplier
        convert = lambda acc: quant.requantize(acc * mult)
    else:
        convert = None

    def run_block(ob: int, scratch: np.ndarray | None) -> None:
        srcs, mask = _sources(params, op, inp, shape, config, ob, weights,
                              weights if op is ReductionOp.POINTWISE_FMA_BINARY else None, quant)
        dest = out.data[ob]
        n_ib = len(srcs)
        for ib, src in enumerate(srcs):
            first = ib == 0
            last = ib == n_ib - 1
            for j in range(o_h):
                for l in range(0, o_w, o_wb):
                    width = min(o_wb, o_w - l)
                    if scratch is not None:
                        io = TileIO(scratch[j, l:l + width], first, seed, mask, acc_dtype,
                                    dest[j, l:l + width] if last else None, convert)
                    elif convert is not None:
                        io = TileIO(dest[j, l:l + width], True, seed, mask, acc_dtype,
                                    dest[j, l:l + width], convert)
                    else:
                        io = TileIO(dest[j, l:l + width], first, seed, mask, acc_dtype)
                    variants[width](io, src, j, l, width)

    def worker(mine: list[int]) -> None:
        scratch = None
        if quant is not None and op is ReductionOp.FMA:
            scratch = np.zeros((o_h, o_w, config.c_b), dtype=np.int32)
        for ob in mine:
            run_block(ob, scratch)

    p = max(1, min(threads, len(blocks)))
    COUNTERS.log("workers", p)
    if p == 1:
        worker(blocks)
        return
    with ThreadPoolExecutor(max_workers=p) as pool:
        futures = [pool.submit(worker, blocks[i::p]) for i in range(p)]
        for f in futures:
            f.result()
