"""The seven-parameter abstract layer and its shape calculus."""

from __future__ import annotations

import enum
from dataclasses import dataclass


class ShapeError(ValueError):
    """A layer window does not fit its input, or shapes disagree."""


class ReductionOp(enum.Enum):
    FMA = "fma"
    MAX = "max"
    POINTWISE_FMA_BINARY = "pointwise_fma_binary"
    UPSAMPLE_NEAREST = "upsample_nearest"

    @property
    def needs_operand(self) -> bool:
        """FMA takes weights and the pointwise op a second tensor; the others take nothing."""
        return self in (ReductionOp.FMA, ReductionOp.POINTWISE_FMA_BINARY)


class LayerClass(enum.Enum):
    SINGLE_ELEMENT = "SingleElement"
    SINGLE_CHANNEL = "SingleChannel"
    PARTIAL_CHANNEL = "PartialChannel"
    FULL_CHANNEL = "FullChannel"
    FULL = "Full"


@dataclass(frozen=True)
class LayerParams:
    f_h: int
    f_w: int
    f_c: int
    s_h: int = 1
    s_w: int = 1
    s_c: int = 1
    k: int = 1
    pad_top: int = 0
    pad_bottom: int = 0
    pad_left: int = 0
    pad_right: int = 0
    # Expanding (nearest-neighbour) maps use an output-driven index instead of
    # the contracting window formula; 1 means a normal contracting layer.
    upsample: int = 1

    def __post_init__(self) -> None:
        for name in ("f_h", "f_w", "f_c", "s_h", "s_w", "s_c", "k", "upsample"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("pad_top", "pad_bottom", "pad_left", "pad_right"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")

    @property
    def has_padding(self) -> bool:
        return bool(self.pad_top or self.pad_bottom or self.pad_left or self.pad_right)

    def padded_input(self, input_shape: tuple[int, int, int]) -> tuple[int, int, int]:
        i_h, i_w, i_c = input_shape
        return (i_h + self.pad_top + self.pad_bottom, i_w + self.pad_left + self.pad_right, i_c)


@dataclass(frozen=True)
class OutputShape:
    height: int
    width: int
    channels: int
    groups: int

    @property
    def hwc(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.channels)


def output_shape(params: LayerParams, input_shape: tuple[int, int, int]) -> OutputShape:
    """Output extents and group count of ``params`` applied to ``input_shape``.

    Divisions floor: trailing elements that do not fill a window are dropped.
    """
    i_h, i_w, i_c = input_shape
    if min(i_h, i_w, i_c) < 1:
        raise ShapeError(f"input dims must be >= 1, got {input_shape}")
    if params.upsample > 1:
        if (params.f_h, params.f_w, params.f_c, params.k) != (1, 1, 1, 1) or params.has_padding:
            raise ShapeError("upsampling layers use a 1x1x1 window, K=1 and no padding")
        u = params.upsample
        return OutputShape(i_h * u, i_w * u, i_c, i_c)
    p_h, p_w, _ = params.padded_input(input_shape)
    for dim, have, need in (("height", p_h, params.f_h), ("width", p_w, params.f_w),
                            ("channels", i_c, params.f_c)):
        if need > have:
            raise ShapeError(f"window {dim} {need} exceeds padded input {dim} {have}")
    o_h = (p_h - params.f_h) // params.s_h + 1
    o_w = (p_w - params.f_w) // params.s_w + 1
    groups = (i_c - params.f_c) // params.s_c + 1
    return OutputShape(o_h, o_w, params.k * groups, groups)


def classify(params: LayerParams, input_shape: tuple[int, int, int]) -> LayerClass:
    """Classify a layer by its window extents.

    Checked strictest first; anything left over is a partial-channel reduction.
    """
    i_h, i_w, i_c = params.padded_input(input_shape)
    f = (params.f_h, params.f_w, params.f_c)
    if f == (1, 1, 1) and params.k == 1:
        return LayerClass.SINGLE_ELEMENT
    if f == (i_h, i_w, i_c):
        return LayerClass.FULL
    if params.f_c == i_c:
        return LayerClass.FULL_CHANNEL
    if params.f_c == 1 and params.k == 1:
        return LayerClass.SINGLE_CHANNEL
    return LayerClass.PARTIAL_CHANNEL
