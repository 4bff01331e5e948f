import ast
import inspect

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import stencilnet.layers as layers_module
from stencilnet import layers as L
from stencilnet.kernels import select_kernel
from stencilnet.params import LayerClass, ReductionOp, classify, output_shape
from stencilnet.verify import fill_case, run_case

dims = st.integers(2, 24)


@settings(max_examples=100, deadline=None)
@given(h=dims, w=dims, c=dims, f=st.integers(2, 5), s=st.integers(1, 3), k=st.integers(1, 40))
def test_class_of_each_layer_kind(h, w, c, f, s, k):
    f = min(f, h - 1, w - 1) if min(h, w) > 2 else 1
    shape = (h, w, c)
    expected = [
        (L.relu(), LayerClass.SINGLE_ELEMENT),
        (L.batchnorm_affine(), LayerClass.SINGLE_ELEMENT),
        (L.add(), LayerClass.SINGLE_ELEMENT),
        (L.upsample_nearest(s), LayerClass.SINGLE_ELEMENT),
        (L.fully_connected(k), LayerClass.FULL),
    ]
    if f > 1:
        expected += [
            (L.depthwise_conv(f, f, s), LayerClass.SINGLE_CHANNEL),
            (L.maxpool(f, f, s), LayerClass.SINGLE_CHANNEL),
            (L.conv2d(f, f, s, k), LayerClass.FULL_CHANNEL),
        ]
    for cpg in range(2, c):
        if c % cpg == 0:
            expected.append((L.group_conv(1, 1, 1, cpg, k), LayerClass.PARTIAL_CHANNEL))
            break
    for layer, cls in expected:
        params = layer.bind(shape)
        assert classify(params, shape) is cls, layer.kind
        output_shape(params, shape)


def test_constructor_parameters():
    p = L.conv2d(3, 3, 1, 64).bind((32, 32, 16))
    assert (p.f_h, p.f_w, p.f_c, p.k, p.s_c) == (3, 3, 16, 64, 1)
    assert output_shape(p, (32, 32, 16)).groups == 1
    p = L.depthwise_conv(3, 3, 2).bind((10, 10, 7))
    assert (p.f_c, p.k, output_shape(p, (10, 10, 7)).groups) == (1, 1, 7)
    p = L.group_conv(3, 3, 1, 4, 2).bind((6, 6, 12))
    assert (p.f_c, p.s_c, p.k, output_shape(p, (6, 6, 12)).channels) == (4, 4, 2, 6)
    p = L.fully_connected(10).bind((2, 3, 5))
    assert (p.f_h, p.f_w, p.f_c, p.k) == (2, 3, 5, 10)


def test_group_conv_groups_are_disjoint():
    p = L.group_conv(1, 1, 1, 3, 1).bind((1, 1, 12))
    groups = output_shape(p, (1, 1, 12)).groups
    used = [set(range(g * p.s_c, g * p.s_c + p.f_c)) for g in range(groups)]
    assert set.union(*used) == set(range(12))
    assert sum(len(u) for u in used) == 12


def test_group_conv_rejects_uneven_split():
    with pytest.raises(ValueError, match="groups"):
        L.group_conv(1, 1, 1, 5, 1).bind((2, 2, 12))


def test_single_group_equals_conv(rng):
    x = rng.standard_normal((5, 5, 6)).astype(np.float32)
    w = rng.standard_normal((1, 4, 6, 3, 3)).astype(np.float32)
    a = fill_case("g", L.group_conv(3, 3, 1, 6, 4).bind(x.shape), ReductionOp.FMA, x, rng)
    b = fill_case("c", L.conv2d(3, 3, 1, 4).bind(x.shape), ReductionOp.FMA, x, rng)
    assert output_shape(a.params, x.shape) == output_shape(b.params, x.shape)
    a.weights = b.weights = w
    np.testing.assert_array_equal(run_case(a), run_case(b))


def test_same_padding_keeps_size():
    for stride, size in [(1, 9), (2, 5)]:
        p = L.conv2d(3, 3, stride, 4, "same").bind((9, 9, 2))
        assert output_shape(p, (9, 9, 2)).hwc[:2] == (size, size)


def test_relu_and_pool_values(rng):
    x = np.array([-1.0, 2.0, -3.0], np.float32).reshape(1, 1, 3)
    relu = L.relu()
    np.testing.assert_array_equal(run_case(fill_case("r", relu.bind(x.shape), relu.op, x, rng, relu)),
                                  [[[0, 2, 0]]])
    const = np.full((4, 4, 3), 2.5, np.float32)
    pool = L.maxpool(2, 2)
    out = run_case(fill_case("p", pool.bind(const.shape), pool.op, const, rng, pool))
    assert out.shape == (2, 2, 3) and np.all(out == 2.5)


def test_identity_cases(rng):
    x = rng.standard_normal((3, 3, 5)).astype(np.float32)
    dw = L.depthwise_conv(1, 1)
    case = fill_case("d", dw.bind(x.shape), dw.op, x, rng, dw)
    case.weights = np.ones_like(case.weights)
    np.testing.assert_array_equal(run_case(case), x)
    up = L.upsample_nearest(1)
    np.testing.assert_array_equal(run_case(fill_case("u", up.bind(x.shape), up.op, x, rng, up)), x)
    add = L.add()
    case = fill_case("a", add.bind(x.shape), add.op, x, rng, add)
    case.second = np.zeros_like(x)
    np.testing.assert_array_equal(run_case(case), x)
    fc = L.fully_connected(5)
    v = x[:1, :1]
    case = fill_case("f", fc.bind(v.shape), fc.op, v, rng, fc)
    case.weights = np.eye(5, dtype=np.float32).reshape(1, 5, 5, 1, 1)
    np.testing.assert_array_equal(run_case(case), v)


def test_relu_and_maxpool_share_max_kernel():
    relu, pool = L.relu(), L.maxpool(2, 2)
    assert relu.op is pool.op is ReductionOp.MAX
    for w in range(1, 7):
        assert select_kernel(relu.op, w).fn is select_kernel(pool.op, w).fn


def test_avgpool_weights_are_not_learned():
    assert not L.avgpool().learned and L.avgpool().op is ReductionOp.FMA
    assert L.avgpool().bind((3, 4, 2)).f_h == 3


def test_layers_module_has_no_loop_nests():
    """Descriptors only describe; execution lives in the shared driver."""
    tree = ast.parse(inspect.getsource(layers_module))
    loops = [n for n in ast.walk(tree)
             if isinstance(n, (ast.For, ast.While, ast.AsyncFor, ast.comprehension))]
    assert loops == []
    assert "numpy" not in {a.name for n in ast.walk(tree) if isinstance(n, ast.Import) for a in n.names}
    assert not any(callable(getattr(L.Layer, name, None)) and name in ("run", "forward", "__call__")
                   for name in dir(L.Layer))
