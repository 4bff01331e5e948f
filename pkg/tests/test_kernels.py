import numpy as np
import pytest

from stencilnet.engine import _sources
from stencilnet.instrument import recording
from stencilnet.kernels import (DEFAULT_O_WB, VECTORIZED, KernelConfig, SourceKind, TileIO,
                                choose_config, select_kernel)
from stencilnet.layout import PlainTensor, pack_activations, pack_weights
from stencilnet.params import LayerParams, ReductionOp, output_shape
from stencilnet.verify import LAYER_KINDS, random_layer_case, run_case


def test_config_defaults_fit_register_budget():
    cfg = KernelConfig()
    assert cfg.c_b == 16 and cfg.o_wb * cfg.c_b // cfg.lane_width <= cfg.register_budget


@pytest.mark.parametrize("kwargs,msg", [
    (dict(o_wb=9), "budget"),
    (dict(g_b=1, k_b=12, lane_width=8), "lane width"),
    (dict(f_cb=32), "f_cb"),
    (dict(o_wb=0), "o_wb"),
])
def test_config_validation(kwargs, msg):
    with pytest.raises(ValueError, match=msg):
        KernelConfig(**kwargs)


@pytest.mark.parametrize("params,c,expect", [
    (LayerParams(3, 3, 16, k=64), 16, (1, 16, 16)),      # conv: K blocked, full F_C block
    (LayerParams(3, 3, 1), 32, (16, 1, 1)),             # depthwise: G blocked
    (LayerParams(3, 3, 4, s_c=4, k=4), 32, (4, 4, 4)),  # group conv: G_b*K_b = 16
    (LayerParams(1, 1, 2, s_c=2, k=24), 8, (1, 16, 2)), # unclean K: flat blocks
])
def test_choose_config(params, c, expect):
    cfg = choose_config(params, c)
    assert (cfg.g_b, cfg.k_b, cfg.f_cb) == expect
    assert cfg.c_b == 16


def test_select_kernel_registry():
    for op in ReductionOp:
        for w in range(1, DEFAULT_O_WB + 1):
            v = select_kernel(op, w, o_wb=DEFAULT_O_WB)
            assert v.implementation == "vectorized" and v.width == w and v.op is op
            assert select_kernel(op, w, prefer_vectorized=False).implementation == "reference"
    # widths outside the vectorized registry fall back to the reference body
    assert (ReductionOp.FMA, 65) not in VECTORIZED
    assert select_kernel(ReductionOp.FMA, 65).implementation == "reference"
    with pytest.raises(ValueError):
        select_kernel(ReductionOp.FMA, 7, o_wb=6)
    with pytest.raises(ValueError):
        select_kernel(ReductionOp.FMA, 0)


@pytest.mark.parametrize("kind", LAYER_KINDS)
def test_reference_and_vectorized_agree(rng, kind):
    for _ in range(6):
        case = random_layer_case(kind, rng)
        ref, vec = run_case(case, prefer_vectorized=False), run_case(case, prefer_vectorized=True)
        if case.op is ReductionOp.FMA:
            scale = max(np.abs(ref).max(), 1e-30)
            assert np.abs(ref - vec).max() / scale < 1e-5
        else:
            np.testing.assert_allclose(ref, vec, rtol=1e-6, atol=1e-6)


@pytest.mark.parametrize("vectorized", [True, False])
def test_phase_discipline(rng, vectorized):
    """Each kernel call is exactly one LOAD then one STORE, in that order."""
    case = random_layer_case("conv", rng)
    oh, ow, oc = output_shape(case.params, case.in_shape).hwc
    cfg = choose_config(case.params, case.in_shape[2])
    n_ib = -(-case.params.f_c // cfg.f_cb)
    n_ob = -(-oc // 16)
    tiles = oh * -(-ow // cfg.o_wb)
    with recording(phases=True) as c:
        run_case(case, vectorized)
        log = c.phase_log
    assert len(log) == 2 * tiles * n_ib * n_ob
    assert log[0::2] == ["LOAD"] * (len(log) // 2)
    assert log[1::2] == ["STORE"] * (len(log) // 2)


@pytest.mark.parametrize("op", [ReductionOp.FMA, ReductionOp.MAX])
@pytest.mark.parametrize("vectorized", [True, False])
def test_tile_writes_only_its_region(rng, op, vectorized):
    """A kernel call touches one tile and does not read the rest of the output."""
    c = 20
    params = LayerParams(3, 3, c, k=16) if op is ReductionOp.FMA else LayerParams(2, 2, 1)
    x = pack_activations(PlainTensor(rng.standard_normal((7, 9, c)).astype(np.float32)))
    shape = output_shape(params, x.shape)
    cfg = choose_config(params, c)
    weights = None
    if op is ReductionOp.FMA:
        weights = pack_weights(rng.standard_normal((1, 16, c, 3, 3)).astype(np.float32), 16, cfg.f_cb)
    srcs, mask = _sources(params, op, x, shape, cfg, 0, weights, None, None)
    fn = select_kernel(op, 4, vectorized).fn
    seed = 0 if op is ReductionOp.FMA else -np.inf
    results = []
    for poison in (np.nan, 123.0):
        out = np.full((shape.height, shape.width, 16), poison, np.float32)
        io = TileIO(out[2, 1:5], True, seed, mask, np.float32)
        fn(io, srcs[0], 2, 1, 4)
        untouched = np.ones(out.shape[:2], bool)
        untouched[2, 1:5] = False
        if np.isnan(poison):
            assert np.isnan(out[untouched]).all()
        else:
            assert (out[untouched] == poison).all()
        assert np.isfinite(out[2, 1:5]).all()
        results.append(out[2, 1:5].copy())
    np.testing.assert_array_equal(results[0], results[1])


def test_source_kinds(rng):
    x = pack_activations(PlainTensor(rng.standard_normal((4, 4, 32)).astype(np.float32)))

    def kind(params):
        shape = output_shape(params, x.shape)
        srcs, _ = _sources(params, ReductionOp.MAX, x, shape, choose_config(params, 32), 0,
                           None, None, None)
        return srcs[0].kind

    assert kind(LayerParams(2, 2, 1)) is SourceKind.LANEWISE
    assert kind(LayerParams(1, 1, 32)) is SourceKind.DENSE
    assert kind(LayerParams(1, 1, 3, s_c=2)) is SourceKind.GATHER

