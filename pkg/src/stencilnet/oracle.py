"""Layout-free reference results used as ground truth.

Nothing here touches the blocked format or the kernels.  ``oracle_layer``
gathers every window of a plain ``[H][W][C]`` tensor and reduces it in one
shot (float64 for float, int64 for integer data); ``oracle_layer_scalar`` is
the literal six-loop form, kept for checking the former on small shapes.
"""

from __future__ import annotations

import math

import numpy as np

from .params import LayerParams, ReductionOp


def _dims(params: LayerParams, h: int, w: int, c: int):
    ph = h + params.pad_top + params.pad_bottom
    pw = w + params.pad_left + params.pad_right
    o_h = (ph - params.f_h) // params.s_h + 1
    o_w = (pw - params.f_w) // params.s_w + 1
    groups = (c - params.f_c) // params.s_c + 1
    return o_h, o_w, groups


def _padded(x: np.ndarray, params: LayerParams, fill) -> np.ndarray:
    return np.pad(x, ((params.pad_top, params.pad_bottom), (params.pad_left, params.pad_right), (0, 0)),
                  constant_values=fill)


def _windows(x: np.ndarray, params: LayerParams, o_h: int, o_w: int, groups: int) -> np.ndarray:
    """All windows as (O_H, O_W, F_H, F_W, G, F_C)."""
    rows = (np.arange(o_h) * params.s_h)[:, None] + np.arange(params.f_h)[None, :]
    cols = (np.arange(o_w) * params.s_w)[:, None] + np.arange(params.f_w)[None, :]
    chans = (np.arange(groups) * params.s_c)[:, None] + np.arange(params.f_c)[None, :]
    return x[rows[:, None, :, None, None, None], cols[None, :, None, :, None, None],
             chans[None, None, None, None, :, :]]


def round_half_away(v: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def _requant(v: np.ndarray, zero_point: int) -> np.ndarray:
    return np.clip(round_half_away(v) + zero_point, 0, 255).astype(np.uint8)


def oracle_layer(params: LayerParams, op: ReductionOp, x: np.ndarray, weights: np.ndarray | None = None,
                 *, second: np.ndarray | None = None, scale: np.ndarray | None = None,
                 shift: np.ndarray | None = None, max_seed: float = -math.inf) -> np.ndarray:
    """Float reference.  ``x`` is ``(H, W, C)``, weights ``[G][K][F_C][F_H][F_W]``.

    Returns float64 ``(O_H, O_W, O_C)``.
    """
    x = np.asarray(x, dtype=np.float64)
    h, w, c = x.shape
    if op is ReductionOp.UPSAMPLE_NEAREST:
        u = params.upsample
        return np.repeat(np.repeat(x, u, axis=0), u, axis=1)
    if op is ReductionOp.POINTWISE_FMA_BINARY:
        if second is not None:
            return x + np.asarray(second, dtype=np.float64)
        return x * np.asarray(scale, dtype=np.float64) + np.asarray(shift, dtype=np.float64)
    o_h, o_w, groups = _dims(params, h, w, c)
    if op is ReductionOp.MAX:
        win = _windows(_padded(x, params, -math.inf), params, o_h, o_w, groups)
        return np.maximum(win.max(axis=(2, 3, 5)), max_seed)
    win = _windows(_padded(x, params, 0.0), params, o_h, o_w, groups)
    wt = np.asarray(weights, dtype=np.float64)
    out = np.einsum("hwxygc,gkcxy->hwgk", win, wt, optimize=True)
    return out.reshape(o_h, o_w, groups * params.k)


def oracle_layer_quantized(params: LayerParams, op: ReductionOp, x: np.ndarray,
                           weights: np.ndarray | None = None, *, in_q=None, w_q=None, out_q=None,
                           second: np.ndarray | None = None, second_q=None,
                           scale: np.ndarray | None = None, shift: np.ndarray | None = None,
                           max_seed: int = 0) -> np.ndarray:
    """Integer reference on uint8 data with exact int64 accumulation."""
    h, w, c = x.shape
    if op is ReductionOp.UPSAMPLE_NEAREST:
        u = params.upsample
        return np.repeat(np.repeat(x, u, axis=0), u, axis=1)
    if op is ReductionOp.POINTWISE_FMA_BINARY:
        a = in_q.scale * (x.astype(np.float64) - in_q.zero_point)
        if second is not None:
            acc = a + second_q.scale * (second.astype(np.float64) - second_q.zero_point)
        else:
            acc = a * np.asarray(scale, dtype=np.float64) + np.asarray(shift, dtype=np.float64)
        return _requant(acc * (1.0 / out_q.scale), out_q.zero_point)
    o_h, o_w, groups = _dims(params, h, w, c)
    if op is ReductionOp.MAX:
        win = _windows(_padded(x, params, 0), params, o_h, o_w, groups)
        return np.maximum(win.max(axis=(2, 3, 5)), np.uint8(max_seed)).astype(np.uint8)
    win = _windows(_padded(x.astype(np.int64), params, in_q.zero_point), params, o_h, o_w, groups)
    win = win - in_q.zero_point
    wt = weights.astype(np.int64) - w_q.zero_point
    acc = np.einsum("hwxygc,gkcxy->hwgk", win, wt).reshape(o_h, o_w, groups * params.k)
    multiplier = in_q.scale * w_q.scale / out_q.scale
    return _requant(acc.astype(np.float64) * multiplier, out_q.zero_point)


def oracle_layer_scalar(params: LayerParams, op: ReductionOp, x: np.ndarray,
                        weights: np.ndarray | None = None, max_seed: float = -math.inf) -> np.ndarray:
    """Six nested loops, one output element at a time (FMA and MAX only)."""
    x = np.asarray(x, dtype=np.float64)
    h, w, c = x.shape
    o_h, o_w, groups = _dims(params, h, w, c)
    k = params.k
    out = np.zeros((o_h, o_w, groups * k))

    def at(r, s, ch):
        r -= params.pad_top
        s -= params.pad_left
        if 0 <= r < h and 0 <= s < w:
            return x[r, s, ch]
        return None

    for oh in range(o_h):
        for ow in range(o_w):
            for oc in range(groups * k):
                g, kk = divmod(oc, k)
                total = 0.0 if op is ReductionOp.FMA else max_seed
                for fx in range(params.f_h):
                    for fy in range(params.f_w):
                        for fc in range(params.f_c):
                            v = at(oh * params.s_h + fx, ow * params.s_w + fy, g * params.s_c + fc)
                            if op is ReductionOp.FMA:
                                if v is not None:
                                    total += v * weights[g, kk, fc, fx, fy]
                            elif v is not None and v > total:
                                total = v
                out[oh, ow, oc] = total
    return out
