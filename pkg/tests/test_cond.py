import numpy as np
import pytest

from vrcodec.cond import (
    UNIT_SCALE_LOGIT,
    CondConv2d,
    ConditioningContext,
    LambdaGrid,
    cond_scale_bias,
    onehot_lambda,
    onehot_rows,
)
from vrcodec.gradcheck import finite_difference_check
from vrcodec.tensor import Tensor, softplus

from conftest import leaf


def test_onehot_lambda():
    np.testing.assert_array_equal(onehot_lambda(ConditioningContext(2, 1.0), LambdaGrid()), [0, 0, 1, 0, 0])
    np.testing.assert_array_equal(onehot_lambda(0, 3), [1, 0, 0])
    with pytest.raises(IndexError):
        onehot_lambda(5, LambdaGrid())


def test_onehot_rows():
    rows = onehot_rows([1, 0, 1], 2)
    np.testing.assert_array_equal(rows, [[0, 1], [1, 0], [0, 1]])
    with pytest.raises(IndexError):
        onehot_rows([2], 2)


def test_grid_validation():
    assert len(LambdaGrid()) == 5
    assert LambdaGrid((1e-2, 1e-3))[1] == 1e-3
    for bad in [(), (1e-2, -1.0), (1e-2, 1e-2), (1e-2, 1e-3, 1e-1)]:
        with pytest.raises(ValueError):
            LambdaGrid(bad)


def test_context_validation():
    grid = LambdaGrid()
    assert ConditioningContext(4, 2.0).validate(grid).delta == 2.0
    with pytest.raises(ValueError):
        ConditioningContext(5, 1.0).validate(grid)
    with pytest.raises(ValueError):
        ConditioningContext(0, 2.5).validate(grid)
    with pytest.raises(ValueError):
        ConditioningContext(0, 0.49).validate(grid)


def test_initial_scale_is_one_and_bias_zero():
    layer = CondConv2d(2, 3, 3, n_lambdas=4)
    scale, bias = cond_scale_bias(layer.u, layer.v, onehot_lambda(1, 4))
    np.testing.assert_allclose(scale.data, 1.0, rtol=1e-12)
    np.testing.assert_array_equal(bias.data, 0.0)
    assert UNIT_SCALE_LOGIT == pytest.approx(np.log(np.e - 1))


def test_scale_bias_select_rows(rng):
    u, v = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    scale, bias = cond_scale_bias(Tensor(u), Tensor(v), onehot_rows([2, 0], 3, np.float64))
    np.testing.assert_allclose(scale.data, np.log1p(np.exp(u[[2, 0]])), rtol=1e-12)
    np.testing.assert_array_equal(bias.data, v[[2, 0]])


def test_conditioning_is_affine_on_plain_conv(rng):
    layer = CondConv2d(2, 3, 3, n_lambdas=2, rng=rng).astype(np.float64)
    layer.u.assign(rng.normal(size=(2, 3)))
    layer.v.assign(rng.normal(size=(2, 3)))
    x = Tensor(rng.normal(size=(1, 2, 5, 5)))
    plain = layer.plain(x).data
    for lam in range(2):
        s = np.log1p(np.exp(layer.u.data[lam]))[None, :, None, None]
        b = layer.v.data[lam][None, :, None, None]
        np.testing.assert_allclose(layer(x, onehot_lambda(lam, 2)).data, s * plain + b, rtol=1e-12)


def test_batch_mixes_lambdas(rng):
    layer = CondConv2d(2, 3, 3, n_lambdas=2, stride=2, rng=rng).astype(np.float64)
    layer.u.assign(rng.normal(size=(2, 3)))
    x = rng.normal(size=(2, 2, 6, 6))
    both = layer(Tensor(x), onehot_rows([0, 1], 2, np.float64)).data
    for i, lam in enumerate([0, 1]):
        single = layer(Tensor(x[i:i + 1]), onehot_lambda(lam, 2)).data
        np.testing.assert_allclose(both[i:i + 1], single, rtol=1e-12)


@pytest.mark.parametrize("kind", ["plain", "transposed", "masked"])
def test_cond_conv_gradients(rng, kind):
    opts = {"plain": {"stride": 2}, "transposed": {"stride": 2, "transposed": True, "output_padding": 1},
            "masked": {"mask_type": "A"}}[kind]
    layer = CondConv2d(2, 3, 5 if kind == "masked" else 3, n_lambdas=2, rng=rng, **opts).astype(np.float64)
    layer.u.assign(rng.normal(size=(2, 3)))
    layer.v.assign(rng.normal(size=(2, 3)))
    x = leaf(rng.normal(size=(2, 2, 4, 4)))
    onehot = onehot_rows([1, 0], 2, np.float64)

    def fn(x, kernel, u, v):
        layer.kernel, layer.u, layer.v = kernel, u, v
        return layer(x, onehot)

    params = [leaf(layer.kernel.data), leaf(layer.u.data), leaf(layer.v.data)]
    assert finite_difference_check(fn, [x] + params, step=1e-5) <= 1e-4


def test_masked_layer_rejects_stride():
    with pytest.raises(ValueError):
        CondConv2d(1, 1, 5, 2, stride=2, mask_type="A")
