import numpy as np
import pytest

from stencilnet import layers as L
from stencilnet.engine import ContractError, Pointwise, output_blocks, run_layer
from stencilnet.instrument import recording
from stencilnet.kernels import KernelConfig, choose_config
from stencilnet.layout import BlockedTensor, PlainTensor, pack_activations, pack_weights
from stencilnet.params import LayerParams, ReductionOp, output_shape
from stencilnet.verify import LAYER_KINDS, check_float_case, random_layer_case, run_case

FMA = ReductionOp.FMA


def _conv_setup(rng, shape=(6, 7, 20), params=LayerParams(3, 3, 20, k=40, pad_top=1, pad_bottom=1,
                                                            pad_left=1, pad_right=1)):
    x = pack_activations(PlainTensor(rng.standard_normal(shape).astype(np.float32)))
    cfg = choose_config(params, shape[2])
    out_shape = output_shape(params, shape)
    w = rng.standard_normal((out_shape.groups, params.k, params.f_c, params.f_h, params.f_w))
    packed = pack_weights(w.astype(np.float32), cfg.c_b, cfg.f_cb)
    out = BlockedTensor.empty(*out_shape.hwc, 16, np.float32)
    return params, x, packed, cfg, out


@pytest.mark.parametrize("kind", LAYER_KINDS)
def test_matches_oracle(rng, kind):
    for i in range(15):
        ok, err = check_float_case(random_layer_case(kind, rng), prefer_vectorized=i % 3 != 0)
        assert ok, err


@pytest.mark.parametrize("kind", ["conv", "depthwise", "group_conv", "overlap_group", "maxpool", "add"])
def test_thread_count_does_not_change_bits(rng, kind):
    for _ in range(4):
        case = random_layer_case(kind, rng)
        base = run_case(case, threads=1)
        for t in (2, 3, 4):
            np.testing.assert_array_equal(run_case(case, threads=t), base)


def test_worker_count_is_capped_by_blocks(rng):
    params, x, packed, cfg, out = _conv_setup(rng)
    for threads, expect in [(1, 1), (2, 2), (8, 3)]:   # 40 channels -> 3 blocks
        with recording() as c:
            run_layer(params, FMA, x, packed, cfg, out, threads)
            assert c.events == [("workers", expect)]


def test_pad_lanes_zero_and_every_output_written(rng):
    params, x, packed, cfg, out = _conv_setup(rng)
    out.data[...] = np.nan
    run_layer(params, FMA, x, packed, cfg, out)
    assert not out.pad_lanes().any()
    assert np.isfinite(out.data).all()


def test_mac_count_matches_window_formula(rng):
    params, x, packed, cfg, out = _conv_setup(rng)
    o = output_shape(params, x.shape)
    with recording() as c:
        run_layer(params, FMA, x, packed, cfg, out)
        assert c["mac"] == o.height * o.width * o.channels * params.f_h * params.f_w * params.f_c


def test_output_blocks_order():
    cfg = KernelConfig(g_b=4, k_b=4, f_cb=4)
    # 8 groups x 4 filters: nested g/k walk covers both blocks once
    assert output_blocks(8, 4, cfg, 32) == [0, 1]
    assert output_blocks(3, 24, KernelConfig(), 72) == [0, 1, 2, 3, 4]


def test_contract_errors(rng):
    params, x, packed, cfg, out = _conv_setup(rng)
    with pytest.raises(ContractError, match="operand"):
        run_layer(params, FMA, x, None, cfg, out)
    with pytest.raises(ContractError, match="output buffer"):
        run_layer(params, FMA, x, packed, cfg, BlockedTensor.empty(2, 2, 40))
    wrong = pack_weights(np.zeros((1, 40, 20, 1, 1), np.float32), 16, 16)
    with pytest.raises(ContractError, match="weights"):
        run_layer(params, FMA, x, wrong, cfg, out)
    with pytest.raises(ContractError, match="float32"):
        run_layer(params, FMA, x, packed, cfg, BlockedTensor.empty(6, 7, 40, 16, np.uint8))
    with pytest.raises(ContractError, match="takes no operand"):
        run_layer(LayerParams(1, 1, 1), ReductionOp.MAX, x, packed, KernelConfig(f_cb=1),
                  BlockedTensor.empty(6, 7, 20))
    other = pack_activations(PlainTensor(np.zeros((6, 7, 3), np.float32)))
    with pytest.raises(ContractError, match="differ"):
        run_layer(LayerParams(1, 1, 1), ReductionOp.POINTWISE_FMA_BINARY, x,
                  Pointwise("add", second=other), KernelConfig(f_cb=1), BlockedTensor.empty(6, 7, 20))


def test_pointwise_needs_complete_operand():
    with pytest.raises(ContractError):
        Pointwise("affine", scale=np.ones(3))
    with pytest.raises(ContractError):
        Pointwise("mul", second=None)


def test_relu_runs_through_driver(rng):
    x = rng.standard_normal((3, 4, 18)).astype(np.float32)
    layer = L.relu()
    params = layer.bind(x.shape)
    out = BlockedTensor.empty(3, 4, 18)
    run_layer(params, layer.op, pack_activations(PlainTensor(x)), None,
              choose_config(params, 18), out, max_seed=layer.max_seed)
    np.testing.assert_array_equal(out.data[0].reshape(-1, 16), np.maximum(x[..., :16], 0).reshape(-1, 16))
