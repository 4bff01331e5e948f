import itertools

import numpy as np
import pytest

from stencilnet.params import LayerClass, LayerParams, ReductionOp, ShapeError, classify, output_shape


def brute_force_windows(i_h, i_w, i_c, p: LayerParams):
    """Count window positions by trying every origin."""
    ph, pw = i_h + p.pad_top + p.pad_bottom, i_w + p.pad_left + p.pad_right
    rows = sum(1 for r in range(0, ph, p.s_h) if r + p.f_h <= ph)
    cols = sum(1 for c in range(0, pw, p.s_w) if c + p.f_w <= pw)
    groups = sum(1 for c in range(0, i_c, p.s_c) if c + p.f_c <= i_c)
    return rows, cols, groups


def test_shape_calculus_randomized(rng):
    checked = 0
    while checked < 1000:
        i_h, i_w, i_c = (int(v) for v in rng.integers(1, 30, 3))
        pads = [int(v) for v in rng.integers(0, 3, 4)]
        f_h = int(rng.integers(1, i_h + pads[0] + pads[1] + 1))
        f_w = int(rng.integers(1, i_w + pads[2] + pads[3] + 1))
        f_c = int(rng.integers(1, i_c + 1))
        s_h, s_w, s_c, k = (int(v) for v in rng.integers(1, 5, 4))
        p = LayerParams(f_h, f_w, f_c, s_h, s_w, s_c, k, *pads)
        out = output_shape(p, (i_h, i_w, i_c))
        assert out.height == (i_h + pads[0] + pads[1] - f_h) // s_h + 1
        assert out.width == (i_w + pads[2] + pads[3] - f_w) // s_w + 1
        assert out.groups == (i_c - f_c) // s_c + 1
        assert out.channels == k * out.groups
        assert brute_force_windows(i_h, i_w, i_c, p) == (out.height, out.width, out.groups)
        checked += 1


def test_worked_example():
    out = output_shape(LayerParams(3, 3, 16, k=64), (32, 32, 16))
    assert out.hwc == (30, 30, 64) and out.groups == 1


def test_floor_drops_partial_windows():
    assert output_shape(LayerParams(2, 2, 1, 2, 2), (5, 5, 3)).hwc == (2, 2, 3)


@pytest.mark.parametrize("params,shape,dim", [
    (LayerParams(4, 1, 1), (3, 3, 3), "height"),
    (LayerParams(1, 5, 1, pad_left=1), (3, 3, 3), "width"),
    (LayerParams(1, 1, 4), (3, 3, 3), "channels"),
])
def test_oversized_window_names_dimension(params, shape, dim):
    with pytest.raises(ShapeError, match=dim):
        output_shape(params, shape)


def test_invalid_params_rejected():
    with pytest.raises(ValueError, match="s_h"):
        LayerParams(1, 1, 1, s_h=0)
    with pytest.raises(ValueError, match="pad_top"):
        LayerParams(1, 1, 1, pad_top=-1)


def test_upsample_shape():
    assert output_shape(LayerParams(1, 1, 1, upsample=3), (2, 4, 5)).hwc == (6, 12, 5)
    with pytest.raises(ShapeError):
        output_shape(LayerParams(2, 1, 1, upsample=2), (2, 2, 2))


@pytest.mark.parametrize("params,shape,cls", [
    (LayerParams(1, 1, 1), (8, 8, 4), LayerClass.SINGLE_ELEMENT),
    (LayerParams(3, 3, 1), (8, 8, 4), LayerClass.SINGLE_CHANNEL),
    (LayerParams(3, 3, 2, s_c=2, k=3), (8, 8, 4), LayerClass.PARTIAL_CHANNEL),
    (LayerParams(3, 3, 4, k=8), (8, 8, 4), LayerClass.FULL_CHANNEL),
    (LayerParams(8, 8, 4, k=10), (8, 8, 4), LayerClass.FULL),
])
def test_classify_each_class(params, shape, cls):
    assert classify(params, shape) is cls


def test_operand_requirements():
    needs = {op: op.needs_operand for op in ReductionOp}
    assert needs == {ReductionOp.FMA: True, ReductionOp.MAX: False,
                     ReductionOp.POINTWISE_FMA_BINARY: True, ReductionOp.UPSAMPLE_NEAREST: False}
