"""Concrete DNN layers as (window parameters, reduction op) descriptors.

A descriptor only knows how to bind itself to an input shape.  Execution
always goes through :func:`stencilnet.engine.run_layer`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .params import LayerParams, ReductionOp

Padding = str | int | tuple[int, int, int, int]


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return (v, v)
    a, b = v
    return (int(a), int(b))


def resolve_padding(padding: Padding, in_h: int, in_w: int, f_h: int, f_w: int,
                    s_h: int, s_w: int) -> tuple[int, int, int, int]:
    """(top, bottom, left, right).  ``"same"`` gives ceil(I/S) outputs, extra pad at the end."""
    if padding == "valid" or padding == 0:
        return (0, 0, 0, 0)
    if padding == "same":
        def split(i, f, s):
            total = max((math.ceil(i / s) - 1) * s + f - i, 0)
            return total // 2, total - total // 2
        return (*split(in_h, f_h, s_h), *split(in_w, f_w, s_w))
    if isinstance(padding, int):
        return (padding,) * 4
    top, bottom, left, right = padding
    return (int(top), int(bottom), int(left), int(right))


@dataclass(frozen=True)
class Layer:
    kind: str
    op: ReductionOp
    window: tuple[int, int] | None = (1, 1)   # None: whole input plane
    stride: tuple[int, int] = (1, 1)
    channels: int = 0                          # conv / fc outputs
    channels_per_group: int = 0
    filters_per_group: int = 1
    padding: Padding = "valid"
    scale: int = 1
    pointwise_mode: str = ""
    max_seed: float = -math.inf
    learned: bool = True

    def bind(self, input_shape: tuple[int, int, int]) -> LayerParams:
        i_h, i_w, i_c = input_shape
        f_h, f_w = self.window if self.window is not None else (i_h, i_w)
        s_h, s_w = self.stride
        pads = resolve_padding(self.padding, i_h, i_w, f_h, f_w, s_h, s_w)
        if self.kind in ("conv", "fc"):
            f_c, s_c, k = i_c, 1, self.channels
        elif self.kind == "group_conv":
            if i_c % self.channels_per_group:
                raise ValueError(f"{i_c} input channels do not split into groups of {self.channels_per_group}")
            f_c = s_c = self.channels_per_group
            k = self.filters_per_group
        else:
            f_c, s_c, k = 1, 1, 1
        return LayerParams(f_h, f_w, f_c, s_h, s_w, s_c, k, *pads, upsample=self.scale)

    @property
    def has_weights(self) -> bool:
        return self.op is ReductionOp.FMA


def conv2d(f_h: int, f_w: int, s=1, out_channels: int = 1, padding: Padding = "valid") -> Layer:
    if out_channels < 1:
        raise ValueError("out_channels must be >= 1")
    return Layer("conv", ReductionOp.FMA, (f_h, f_w), _pair(s), channels=out_channels, padding=padding)


def depthwise_conv(f_h: int, f_w: int, s=1, padding: Padding = "valid") -> Layer:
    return Layer("depthwise_conv", ReductionOp.FMA, (f_h, f_w), _pair(s), padding=padding)


def group_conv(f_h: int, f_w: int, s=1, channels_per_group: int = 1, filters_per_group: int = 1,
               padding: Padding = "valid") -> Layer:
    return Layer("group_conv", ReductionOp.FMA, (f_h, f_w), _pair(s),
                 channels_per_group=channels_per_group, filters_per_group=filters_per_group,
                 padding=padding)


def maxpool(f_h: int, f_w: int, s=None, padding: Padding = "valid") -> Layer:
    return Layer("maxpool", ReductionOp.MAX, (f_h, f_w), _pair(s if s is not None else (f_h, f_w)),
                 padding=padding)


def relu() -> Layer:
    return Layer("relu", ReductionOp.MAX, max_seed=0.0)


def avgpool(f_h: int | None = None, f_w: int | None = None, s=None) -> Layer:
    """Average pooling as a depthwise FMA with fixed 1/(F_H*F_W) weights.

    Leaving the window unset pools the whole plane.  The weights are
    constants, not learned parameters.
    """
    window = None if f_h is None else (f_h, f_w if f_w is not None else f_h)
    stride = _pair(s) if s is not None else (window or (1, 1))
    return Layer("avgpool", ReductionOp.FMA, window, stride, learned=False)


def fully_connected(out_features: int) -> Layer:
    return Layer("fc", ReductionOp.FMA, None, (1, 1), channels=out_features)


def add() -> Layer:
    return Layer("add", ReductionOp.POINTWISE_FMA_BINARY, pointwise_mode="add")


def batchnorm_affine() -> Layer:
    """Inference-time batch norm folded to per-channel ``x * scale + shift``."""
    return Layer("batchnorm", ReductionOp.POINTWISE_FMA_BINARY, pointwise_mode="affine")


def upsample_nearest(scale: int) -> Layer:
    if scale < 1:
        raise ValueError("upsample scale must be >= 1")
    return Layer("upsample", ReductionOp.UPSAMPLE_NEAREST, scale=scale)
