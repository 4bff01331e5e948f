"""Register-tile kernels: the only code that would be retuned per target.

Every kernel has three phases.  LOAD brings an ``o_wb x C_b`` output tile
into an accumulator (or seeds it on the first input-channel block), COMPUTE
folds one ``F_H x F_W x F_Cb`` window into it, and STORE writes it back with
padding lanes masked to zero.  The reference bodies are plain scalar loops
over the tile; the vectorized bodies do the same work with
whole-tile numpy operations and may reassociate the sums.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .instrument import COUNTERS
from .params import LayerParams, ReductionOp

DEFAULT_O_WB = 6
DEFAULT_LANE_WIDTH = 8
DEFAULT_REGISTER_BUDGET = 16


@dataclass(frozen=True)
class KernelConfig:
    o_wb: int = DEFAULT_O_WB
    g_b: int = 1
    k_b: int = 16
    f_cb: int = 16
    lane_width: int = DEFAULT_LANE_WIDTH
    register_budget: int = DEFAULT_REGISTER_BUDGET

    def __post_init__(self) -> None:
        for name in ("o_wb", "g_b", "k_b", "f_cb", "lane_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.c_b % self.lane_width:
            raise ValueError(f"C_b={self.c_b} is not a multiple of lane width {self.lane_width}")
        if self.f_cb > self.c_b:
            raise ValueError(f"f_cb={self.f_cb} exceeds the channel block {self.c_b}")
        if self.o_wb * self.c_b // self.lane_width > self.register_budget:
            raise ValueError(
                f"tile of {self.o_wb}x{self.c_b} needs "
                f"{self.o_wb * self.c_b // self.lane_width} accumulators, "
                f"budget is {self.register_budget}"
            )

    @property
    def c_b(self) -> int:
        return self.g_b * self.k_b


def choose_config(params: LayerParams, input_channels: int, block: int = 16,
                  o_wb: int = DEFAULT_O_WB, lane_width: int = DEFAULT_LANE_WIDTH,
                  register_budget: int = DEFAULT_REGISTER_BUDGET) -> KernelConfig:
    """Pick G_b/K_b/F_Cb for a layer at output-channel block ``block``."""
    groups = (input_channels - params.f_c) // params.s_c + 1
    k = params.k
    if groups == 1 or k % block == 0:
        g_b, k_b = 1, block
    elif block % k == 0:
        g_b, k_b = block // k, k
    else:
        # no exact split; the driver falls back to flat output-channel blocks
        g_b, k_b = 1, block
    if params.f_c == input_channels and groups == 1:
        f_cb = block
    else:
        f_cb = min(params.f_c, block)
    lane_width = min(lane_width, block)
    return KernelConfig(o_wb=o_wb, g_b=g_b, k_b=k_b, f_cb=f_cb, lane_width=lane_width,
                        register_budget=max(register_budget, -(-o_wb * block // lane_width)))


# -- LOAD / STORE -------------------------------------------------------------

class TileIO:
    """LOAD and STORE phases for one output tile.

    ``view`` is where partial results live between input-channel blocks.  When
    ``final`` is set, STORE converts the accumulator with ``convert`` and
    writes it there instead (the quantized path's last block).
    """

    __slots__ = ("view", "first", "seed", "mask", "acc_dtype", "final", "convert")

    def __init__(self, view, first, seed, mask, acc_dtype, final=None, convert=None):
        self.view = view
        self.first = first
        self.seed = seed
        self.mask = mask
        self.acc_dtype = acc_dtype
        self.final = final
        self.convert = convert

    def load(self) -> np.ndarray:
        COUNTERS.phase("LOAD")
        if self.first:
            return np.full(self.view.shape, self.seed, dtype=self.acc_dtype)
        return self.view.astype(self.acc_dtype, copy=True)

    def store(self, acc: np.ndarray) -> None:
        COUNTERS.phase("STORE")
        if self.final is not None:
            out = self.convert(acc)
            if self.mask is not None:
                out[:, ~self.mask] = 0
            self.final[...] = out
            return
        if self.mask is not None:
            acc[:, ~self.mask] = 0
        self.view[...] = acc


# -- tile sources ---------------------------------------------------------------

class SourceKind(enum.Enum):
    DENSE = "dense"        # every lane reads the same contiguous run of input lanes
    LANEWISE = "lanewise"  # lane t reads lane t of one input block
    GATHER = "gather"      # arbitrary (block, lane) per (ii, t)


@dataclass
class TileSource:
    """Static description of what an output block reads for one F_Cb step."""

    inp: np.ndarray
    kind: SourceKind
    f_h: int
    f_w: int
    s_h: int
    s_w: int
    f_cb: int
    c_b: int
    blk: int = 0
    lane0: int = 0
    blk_idx: np.ndarray | None = None   # (f_cb, c_b) for GATHER
    lane_idx: np.ndarray | None = None
    weights: np.ndarray | None = None   # (F_H, F_W, F_Cb, C_b)
    second: np.ndarray | None = None    # second operand tile source for pointwise ops
    scale: np.ndarray | None = None     # per-lane affine factors
    shift: np.ndarray | None = None
    upsample: int = 1
    in_offset: int = 0                  # subtracted from inputs (quantized zero point)
    second_offset: int = 0
    in_scale: float = 1.0
    second_scale: float = 1.0
    pointwise_mode: str = "add"
    macs_per_column: int = 0
    col_cache: dict = field(default_factory=dict)
    _gather_blocks: np.ndarray | None = None
    _gather_pos: np.ndarray | None = None

    def cols(self, l: int, width: int) -> np.ndarray:
        """Input columns (F_W, width) touched by output columns l..l+width-1."""
        base = self.col_cache.get(width)
        if base is None:
            base = (np.arange(self.f_w)[:, None]
                    + self.s_w * np.arange(width)[None, :])
            self.col_cache[width] = base
        return base + l * self.s_w

    def patch(self, j: int, l: int, width: int) -> np.ndarray:
        """Input window for a tile: (F_H, F_W, width, F_Cb) or (..., F_Cb, C_b)."""
        h0 = j * self.s_h
        cols = self.cols(l, width)
        if self.kind is SourceKind.DENSE:
            rows = self.inp[self.blk, h0:h0 + self.f_h]
            return rows[:, cols, self.lane0:self.lane0 + self.f_cb]
        if self.kind is SourceKind.LANEWISE:
            rows = self.inp[self.blk, h0:h0 + self.f_h]
            return rows[:, cols, :]
        if self._gather_blocks is None:
            self._gather_blocks, self._gather_pos = np.unique(self.blk_idx, return_inverse=True)
            self._gather_pos = self._gather_pos.reshape(self.blk_idx.shape)
        sub = self.inp[self._gather_blocks, h0:h0 + self.f_h][:, :, cols]
        # (nu, F_H, F_W, width, C_b) -> (F_H, F_W, width, F_Cb, C_b)
        picked = sub[self._gather_pos, :, :, :, self.lane_idx]
        return np.moveaxis(picked, (0, 1), (3, 4))

    def channel_of(self, ii: int, t: int) -> tuple[int, int]:
        if self.kind is SourceKind.DENSE:
            return self.blk, self.lane0 + ii
        if self.kind is SourceKind.LANEWISE:
            return self.blk, t
        return int(self.blk_idx[ii, t]), int(self.lane_idx[ii, t])


# -- COMPUTE bodies ---------------------------------------------------------------

def _centered(a: np.ndarray, src: TileSource) -> np.ndarray:
    if src.in_offset or a.dtype == np.uint8:
        return a.astype(np.int32) - src.in_offset
    return a


def fma_vectorized(io: TileIO, src: TileSource, j: int, l: int, width: int) -> None:
    acc = io.load()
    COUNTERS.add("mac", width * src.macs_per_column)
    patch = _centered(src.patch(j, l, width), src)
    w = src.weights
    if src.kind is SourceKind.DENSE:
        acc += np.tensordot(patch, w, axes=([0, 1, 3], [0, 1, 2])).astype(acc.dtype, copy=False)
    elif src.kind is SourceKind.LANEWISE:
        acc += np.einsum("xywc,xyc->wc", patch, w[:, :, 0, :]).astype(acc.dtype, copy=False)
    else:
        acc += np.einsum("xywic,xyic->wc", patch, w).astype(acc.dtype, copy=False)
    io.store(acc)


def fma_reference(io: TileIO, src: TileSource, j: int, l: int, width: int) -> None:
    acc = io.load()
    COUNTERS.add("mac", width * src.macs_per_column)
    integer = acc.dtype.kind == "i"
    tile = acc.tolist()
    inp, w = src.inp, src.weights
    off = src.in_offset
    h0 = j * src.s_h
    locs = [[src.channel_of(ii, t) for t in range(src.c_b)] for ii in range(src.f_cb)]
    for x in range(src.f_h):
        for y in range(src.f_w):
            for ii in range(src.f_cb):
                wrow = w[x, y, ii].tolist()
                loc = locs[ii]
                for ll in range(width):
                    col = (l + ll) * src.s_w + y
                    row = tile[ll]
                    for t in range(src.c_b):
                        b, lane = loc[t]
                        v = inp[b, h0 + x, col, lane].item()
                        row[t] += (v - off if integer else v) * wrow[t]
    acc[...] = np.asarray(tile, dtype=acc.dtype)
    io.store(acc)


def max_vectorized(io: TileIO, src: TileSource, j: int, l: int, width: int) -> None:
    acc = io.load()
    patch = src.patch(j, l, width)
    if src.kind is SourceKind.LANEWISE:
        m = patch.max(axis=(0, 1))
    elif src.kind is SourceKind.DENSE:
        m = patch.max(axis=(0, 1, 3))[:, None]
    else:
        m = patch.max(axis=(0, 1, 3))
    np.maximum(acc, m, out=acc, casting="unsafe")
    io.store(acc)


def max_reference(io: TileIO, src: TileSource, j: int, l: int, width: int) -> None:
    acc = io.load()
    tile = acc.tolist()
    inp = src.inp
    h0 = j * src.s_h
    nii = 1 if src.kind is SourceKind.LANEWISE else src.f_cb
    for x in range(src.f_h):
        for y in range(src.f_w):
            for ii in range(nii):
                for ll in range(width):
                    col = (l + ll) * src.s_w + y
                    row = tile[ll]
                    for t in range(src.c_b):
                        b, lane = src.channel_of(ii, t)
                        v = inp[b, h0 + x, col, lane].item()
                        if v > row[t]:
                            row[t] = v
    acc[...] = np.asarray(tile, dtype=acc.dtype)
    io.store(acc)


def _pointwise_operands(src: TileSource, j: int, l: int, width: int):
    a = src.inp[src.blk, j, l:l + width, :]
    b = src.second[src.blk, j, l:l + width, :] if src.second is not None else None
    return a, b


def pointwise_vectorized(io: TileIO, src: TileSource, j: int, l: int, width: int) -> None:
    acc = io.load()
    a, b = _pointwise_operands(src, j, l, width)
    quantized = a.dtype == np.uint8
    if quantized:
        a = src.in_scale * (a.astype(np.float64) - src.in_offset)
    if src.pointwise_mode == "add":
        if quantized:
            b = src.second_scale * (b.astype(np.float64) - src.second_offset)
        acc[...] = a + b
    else:
        acc[...] = a * src.scale + src.shift
    io.store(acc)


def pointwise_reference(io: TileIO, src: TileSource, j: int, l: int, width: int) -> None:
    acc = io.load()
    a, b = _pointwise_operands(src, j, l, width)
    quantized = a.dtype == np.uint8
    tile = acc.tolist()
    for ll in range(width):
        for t in range(src.c_b):
            av = a[ll, t].item()
            if quantized:
                av = src.in_scale * (av - src.in_offset)
            if src.pointwise_mode == "add":
                bv = b[ll, t].item()
                if quantized:
                    bv = src.second_scale * (bv - src.second_offset)
                tile[ll][t] = av + bv
            else:
                tile[ll][t] = av * src.scale[t].item() + src.shift[t].item()
    acc[...] = np.asarray(tile, dtype=acc.dtype)
    io.store(acc)


def upsample_vectorized(io: TileIO, src: TileSource, j: int, l: int, width: int) -> None:
    acc = io.load()
    u = src.upsample
    acc[...] = src.inp[src.blk, j // u, (l + np.arange(width)) // u, :]
    io.store(acc)


def upsample_reference(io: TileIO, src: TileSource, j: int, l: int, width: int) -> None:
    acc = io.load()
    u = src.upsample
    for ll in range(width):
        for t in range(src.c_b):
            acc[ll, t] = src.inp[src.blk, j // u, (l + ll) // u, t]
    io.store(acc)


# -- variant registry ---------------------------------------------------------------

KernelFn = Callable[[TileIO, TileSource, int, int, int], None]


@dataclass(frozen=True)
class KernelVariant:
    op: ReductionOp
    width: int
    implementation: str  # "reference" | "vectorized"
    fn: KernelFn


_REFERENCE: dict[ReductionOp, KernelFn] = {
    ReductionOp.FMA: fma_reference,
    ReductionOp.MAX: max_reference,
    ReductionOp.POINTWISE_FMA_BINARY: pointwise_reference,
    ReductionOp.UPSAMPLE_NEAREST: upsample_reference,
}

_VECTORIZED_BODIES: dict[ReductionOp, KernelFn] = {
    ReductionOp.FMA: fma_vectorized,
    ReductionOp.MAX: max_vectorized,
    ReductionOp.POINTWISE_FMA_BINARY: pointwise_vectorized,
    ReductionOp.UPSAMPLE_NEAREST: upsample_vectorized,
}

# (op, width) -> body; numpy bodies are width-generic so every remainder
# width up to the largest supported tile is registered.
VECTORIZED: dict[tuple[ReductionOp, int], KernelFn] = {
    (op, w): fn for op, fn in _VECTORIZED_BODIES.items() for w in range(1, 65)
}


def select_kernel(op: ReductionOp, width: int, prefer_vectorized: bool = True,
                  o_wb: int | None = None) -> KernelVariant:
    if width < 1 or (o_wb is not None and width > o_wb):
        raise ValueError(f"tile width {width} outside 1..{o_wb}")
    if prefer_vectorized:
        fn = VECTORIZED.get((op, width))
        if fn is not None:
            return KernelVariant(op, width, "vectorized", fn)
    return KernelVariant(op, width, "reference", _REFERENCE[op])
