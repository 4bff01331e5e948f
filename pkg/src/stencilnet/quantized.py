"""uint8 inference on the same loop nest, layout and kernels.

Accumulation is int32; results are requantized to uint8 when the last
input-channel block is stored.  Quantization is per tensor.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .engine import Pointwise, QuantBinding, run_layer
from .kernels import KernelConfig
from .layout import BlockedTensor, PackedWeights, PlainTensor, pack_weights
from .params import LayerParams, ReductionOp

INT32_MAX = 2**31 - 1


class OverflowRisk(ValueError):
    """A window is large enough that the int32 accumulator could overflow."""


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int

    def __post_init__(self) -> None:
        if not self.scale > 0:
            raise ValueError(f"scale must be > 0, got {self.scale}")
        if not 0 <= self.zero_point <= 255:
            raise ValueError(f"zero_point must be in [0, 255], got {self.zero_point}")

    @classmethod
    def from_range(cls, lo: float, hi: float) -> "QuantParams":
        """Affine params covering [lo, hi] (widened to include zero)."""
        lo, hi = min(float(lo), 0.0), max(float(hi), 0.0)
        if hi - lo <= 0:
            return cls(1.0, 0)
        scale = (hi - lo) / 255.0
        zp = int(np.clip(round_half_away(np.float64(-lo / scale)), 0, 255))
        return cls(scale, zp)


def round_half_away(v):
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def requantize(v: np.ndarray, zero_point: int) -> np.ndarray:
    """float64 -> uint8: round half away from zero, shift, saturate."""
    return np.clip(round_half_away(v) + zero_point, 0, 255).astype(np.uint8)


def quantize(t: PlainTensor | np.ndarray, q: QuantParams) -> PlainTensor:
    data = t.data if isinstance(t, PlainTensor) else np.asarray(t)
    return PlainTensor(requantize(data.astype(np.float64) / q.scale, q.zero_point))


def quantize_array(a: np.ndarray, q: QuantParams) -> np.ndarray:
    return requantize(np.asarray(a, dtype=np.float64) / q.scale, q.zero_point)


def dequantize(t: PlainTensor | np.ndarray, q: QuantParams) -> PlainTensor:
    data = t.data if isinstance(t, PlainTensor) else np.asarray(t)
    return PlainTensor(((data.astype(np.float64) - q.zero_point) * q.scale).astype(np.float32))


def check_accumulator_range(params: LayerParams) -> None:
    window = params.f_h * params.f_w * params.f_c
    if window * 255 * 255 > INT32_MAX:
        raise OverflowRisk(
            f"window {params.f_h}x{params.f_w}x{params.f_c} = {window} elements can reach "
            f"{window * 255 * 255} > int32 max {INT32_MAX}"
        )


def pack_quantized_weights(q_weights: np.ndarray, w_q: QuantParams, config: KernelConfig) -> PackedWeights:
    """Pack uint8 ``[G][K][F_C][F_H][F_W]`` weights as zero-point-centred int32."""
    centered = q_weights.astype(np.int32) - w_q.zero_point
    return pack_weights(centered, config.c_b, config.f_cb)


def run_layer_quantized(params: LayerParams, op: ReductionOp, inp: BlockedTensor,
                        weights: PackedWeights | Pointwise | None, config: KernelConfig,
                        out: BlockedTensor, threads: int = 1, *, in_q: QuantParams,
                        out_q: QuantParams, w_q: QuantParams | None = None,
                        second_q: QuantParams | None = None, max_seed: float = -math.inf,
                        prefer_vectorized: bool = True) -> None:
    """uint8 twin of :func:`stencilnet.engine.run_layer`.

    FMA weights must come from :func:`pack_quantized_weights`.  MAX and
    upsampling keep the input's quantization; a finite ``max_seed`` (a real
    value, e.g. 0.0 for relu) is quantized with the input params and seeds
    every MAX tile.
    """
    if op is ReductionOp.FMA:
        check_accumulator_range(params)
        if w_q is None:
            raise ValueError("FMA layers need weight quantization params")
        multiplier = in_q.scale * w_q.scale / out_q.scale
    elif op is ReductionOp.POINTWISE_FMA_BINARY:
        if isinstance(weights, Pointwise) and weights.mode == "add" and second_q is None:
            raise ValueError("add needs the second operand's quantization params")
        multiplier = 1.0 / out_q.scale
    else:
        if out_q != in_q:
            raise ValueError(f"{op.name} layers keep their input quantization")
        multiplier = 1.0
    binding = QuantBinding(
        in_zero_point=in_q.zero_point, in_scale=in_q.scale, multiplier=multiplier,
        requantize=lambda v: requantize(v, out_q.zero_point),
        second_zero_point=second_q.zero_point if second_q else 0,
        second_scale=second_q.scale if second_q else 1.0,
    )
    seed = 0 if max_seed == -math.inf else int(quantize_array(np.float64(max_seed), in_q))
    run_layer(params, op, inp, weights, config, out, threads, prefer_vectorized=prefer_vectorized,
              max_seed=seed, quant=binding)


# -- quantized weight files ---------------------------------------------------

_HEADER = struct.Struct("<dB")


def write_quantized_tensor(fh, q_weights: np.ndarray, q: QuantParams) -> None:
    fh.write(_HEADER.pack(q.scale, q.zero_point))
    fh.write(np.asarray(q_weights, dtype=np.uint8).tobytes())


def read_quantized_tensors(path: str | Path, sizes: list[int]) -> list[tuple[np.ndarray, QuantParams]]:
    """Split a quantized weight file into per-layer (payload, params) pairs."""
    raw = Path(path).read_bytes()
    out, pos = [], 0
    for n in sizes:
        if pos + _HEADER.size + n > len(raw):
            raise ValueError(f"{path}: truncated at tensor {len(out)} (need {n} bytes)")
        scale, zp = _HEADER.unpack_from(raw, pos)
        pos += _HEADER.size
        out.append((np.frombuffer(raw, dtype=np.uint8, count=n, offset=pos).copy(), QuantParams(scale, zp)))
        pos += n
    if pos != len(raw):
        raise ValueError(f"{path}: {len(raw) - pos} trailing bytes after {len(sizes)} tensors")
    return out
