import numpy as np
import pytest
from scipy import signal

from vrcodec.conv import causal_mask, conv2d, conv_output_size, conv_transpose2d, gdn, masked_conv2d
from vrcodec.gradcheck import finite_difference_check
from vrcodec.nn import GDN
from vrcodec.tensor import Tensor

from conftest import leaf


def reference_conv(x, k, stride, padding):
    """Direct cross-correlation via scipy, one (batch, out, in) plane at a time."""
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    b, oc = x.shape[0], k.shape[0]
    full = np.stack([
        np.stack([sum(signal.correlate2d(xp[n, i], k[o, i], mode="valid") for i in range(x.shape[1]))
                  for o in range(oc)])
        for n in range(b)
    ])
    return full[:, :, ::stride, ::stride]


def test_sum_of_ones():
    out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1) and out.data.item() == 9.0


def test_strided_identity(rng):
    x = rng.normal(size=(1, 1, 4, 4))
    out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), stride=2)
    np.testing.assert_array_equal(out.data, x[:, :, ::2, ::2])


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 2), (3, 0)])
def test_matches_direct_correlation(rng, stride, padding):
    x = rng.normal(size=(2, 3, 9, 8))
    k = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out = conv2d(Tensor(x), Tensor(k), Tensor(b), stride=stride, padding=padding)
    expected = reference_conv(x, k, stride, padding) + b[None, :, None, None]
    assert out.shape[2:] == (conv_output_size(9, 3, stride, padding), conv_output_size(8, 3, stride, padding))
    np.testing.assert_allclose(out.data, expected, rtol=1e-12, atol=1e-12)


def test_conv2d_gradients(rng):
    x, k, b = leaf(rng.normal(size=(2, 3, 8, 8))), leaf(rng.normal(size=(4, 3, 3, 3))), leaf(rng.normal(size=4))
    fn = lambda x, k, b: conv2d(x, k, b, stride=2, padding=1)
    assert finite_difference_check(fn, [x, k, b], step=1e-4) <= 1e-4


def test_conv2d_errors(rng):
    x = Tensor(rng.normal(size=(1, 2, 5, 5)))
    with pytest.raises(ValueError):
        conv2d(x, Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(ValueError):
        conv2d(x, Tensor(np.ones((1, 2, 3, 3))), stride=0)
    with pytest.raises(ValueError):
        conv2d(Tensor(np.ones((2, 5, 5))), Tensor(np.ones((1, 2, 3, 3))))


def test_transposed_disjoint_placement():
    out = conv_transpose2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 2, 2))), stride=2)
    np.testing.assert_array_equal(out.data, np.ones((1, 1, 4, 4)))


@pytest.mark.parametrize("h,k,s,p", [(3, 3, 1, 1), (4, 5, 2, 2), (5, 4, 3, 0)])
def test_transposed_output_extent(rng, h, k, s, p):
    out = conv_transpose2d(Tensor(rng.normal(size=(1, 2, h, h))), Tensor(rng.normal(size=(2, 3, k, k))), stride=s, padding=p)
    assert out.shape == (1, 3, (h - 1) * s - 2 * p + k, (h - 1) * s - 2 * p + k)


def test_conv_then_transposed_restores_extent(rng):
    x = Tensor(rng.normal(size=(1, 2, 16, 12)))
    down = conv2d(x, Tensor(rng.normal(size=(3, 2, 5, 5))), stride=2, padding=2)
    up = conv_transpose2d(down, Tensor(rng.normal(size=(3, 2, 5, 5))), stride=2, padding=2, output_padding=1)
    assert up.shape == x.shape


@pytest.mark.parametrize("stride,padding", [(1, 1), (2, 2), (2, 0)])
def test_adjointness(rng, stride, padding):
    x = rng.normal(size=(2, 3, 10, 10))
    k = rng.normal(size=(4, 3, 5, 5))
    y_shape = conv2d(Tensor(x), Tensor(k), stride=stride, padding=padding).shape
    y = rng.normal(size=y_shape)
    lhs = np.sum(conv2d(Tensor(x), Tensor(k), stride=stride, padding=padding).data * y)
    # conv2d's (out, in) kernel is the transposed conv's (in, out) kernel
    back = conv_transpose2d(Tensor(y), Tensor(k), stride=stride, padding=padding,
                            output_padding=(10 + 2 * padding - 5) % stride)
    rhs = np.sum(x * back.data)
    assert lhs == pytest.approx(rhs, rel=1e-10)


def test_transposed_input_gradient_is_conv(rng):
    k = rng.normal(size=(2, 3, 3, 3))
    x = leaf(rng.normal(size=(1, 2, 4, 4)))
    out = conv_transpose2d(x, Tensor(k), stride=2, padding=1, output_padding=1)
    g = rng.normal(size=out.shape)
    out.backward(g)
    np.testing.assert_allclose(x.grad, conv2d(Tensor(g), Tensor(k), stride=2, padding=1).data, rtol=1e-10)


def test_transposed_gradients(rng):
    x, k, b = leaf(rng.normal(size=(2, 2, 4, 4))), leaf(rng.normal(size=(2, 3, 5, 5))), leaf(rng.normal(size=3))
    fn = lambda x, k, b: conv_transpose2d(x, k, b, stride=2, padding=2, output_padding=1)
    assert finite_difference_check(fn, [x, k, b], step=1e-4) <= 1e-4


def test_transposed_rejects_bad_output_padding(rng):
    with pytest.raises(ValueError):
        conv_transpose2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))), stride=2, output_padding=2)


# -- masked convolutions -------------------------------------------------------


def test_mask_tap_counts():
    assert causal_mask(5, 5, "A").sum() == 12
    assert causal_mask(5, 5, "B").sum() == 13
    assert causal_mask(3, 3, "A").sum() == 4
    with pytest.raises(ValueError):
        causal_mask(4, 4, "A")
    with pytest.raises(ValueError):
        causal_mask(3, 3, "C")


def test_type_a_single_impulse():
    x = np.zeros((1, 1, 6, 6))
    r, c = 2, 3
    x[0, 0, r, c] = 1.0
    out = masked_conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3))), "A").data[0, 0]
    raster = np.arange(36).reshape(6, 6)
    assert np.all(out[raster <= r * 6 + c] == 0.0)
    assert out.sum() == 4.0  # reaches the positions whose causal neighbourhood contains (r, c)


@pytest.mark.parametrize("mask_type", ["A", "B"])
def test_exhaustive_causality(rng, mask_type):
    k = Tensor(rng.normal(size=(2, 2, 5, 5)))
    x = rng.normal(size=(1, 2, 8, 8))
    base = masked_conv2d(Tensor(x), k, mask_type).data.reshape(2, -1)
    for pos in range(64):
        bumped = x.copy()
        bumped[0, :, pos // 8, pos % 8] += 1.0
        diff = np.any(masked_conv2d(Tensor(bumped), k, mask_type).data.reshape(2, -1) != base, axis=0)
        changed = np.flatnonzero(diff)
        limit = pos if mask_type == "A" else pos - 1
        assert changed.size == 0 or changed.min() > limit
        if mask_type == "B":
            assert diff[pos]


def test_masked_gradients(rng):
    x, k = leaf(rng.normal(size=(1, 2, 6, 6))), leaf(rng.normal(size=(3, 2, 5, 5)))
    assert finite_difference_check(lambda x, k: masked_conv2d(x, k, "A"), [x, k], step=1e-4) <= 1e-4
    masked_conv2d(x, k, "A").backward(np.ones((1, 3, 6, 6)))
    assert np.all(k.grad[:, :, 2, 2:] == 0) and np.all(k.grad[:, :, 3:] == 0)


# -- GDN -----------------------------------------------------------------------


def test_gdn_identity_when_gamma_zero(rng):
    x = rng.normal(size=(2, 3, 4, 4))
    out = gdn(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros((3, 3))))
    np.testing.assert_array_equal(out.data, x)
    np.testing.assert_array_equal(gdn(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros((3, 3))), inverse=True).data, x)


def test_gdn_closed_form():
    one = Tensor(np.ones((1, 1, 1, 1)))
    assert gdn(one, Tensor(np.ones(1)), Tensor(np.ones((1, 1)))).data.item() == pytest.approx(1 / np.sqrt(2))
    assert gdn(one, Tensor(np.ones(1)), Tensor(np.ones((1, 1))), inverse=True).data.item() == pytest.approx(np.sqrt(2))


def test_gdn_matches_formula(rng):
    x = rng.normal(size=(2, 3, 4, 5))
    beta = rng.uniform(0.5, 1.5, size=3)
    gamma = rng.uniform(0.0, 0.5, size=(3, 3))
    norm = np.sqrt(beta[None, :, None, None] + np.einsum("ji,bihw->bjhw", gamma, x**2))
    np.testing.assert_allclose(gdn(Tensor(x), Tensor(beta), Tensor(gamma)).data, x / norm, rtol=1e-12)
    np.testing.assert_allclose(gdn(Tensor(x), Tensor(beta), Tensor(gamma), inverse=True).data, x * norm, rtol=1e-12)


@pytest.mark.parametrize("inverse", [False, True])
def test_gdn_gradients(rng, inverse):
    x = leaf(rng.normal(size=(2, 2, 3, 3)))
    beta = leaf(rng.uniform(0.5, 1.5, size=2))
    gamma = leaf(rng.uniform(0.1, 0.5, size=(2, 2)))
    fn = lambda x, b, g: gdn(x, b, g, inverse=inverse)
    assert finite_difference_check(fn, [x, beta, gamma], step=1e-5) <= 1e-4


def test_gdn_rejects_nonpositive_beta():
    with pytest.raises(ValueError):
        gdn(Tensor(np.ones((1, 2, 2, 2))), Tensor(np.array([1.0, 0.0])), Tensor(np.zeros((2, 2))))


def test_gdn_layer_reparameterization(rng):
    layer = GDN(4)
    layer.beta.assign(np.zeros(4))
    layer.gamma.assign(-np.ones((4, 4)))
    beta = layer.effective_beta().data
    assert np.all(beta == np.float32(2.0**-10))
    out = layer(Tensor(rng.normal(size=(1, 4, 3, 3)).astype(np.float32)))
    assert np.all(np.isfinite(out.data))


def test_gdn_layer_initial_state_is_near_identity(rng):
    layer = GDN(3).astype(np.float64)
    x = 1e-3 * rng.normal(size=(1, 3, 2, 2))
    np.testing.assert_allclose(layer(Tensor(x)).data, x, rtol=1e-6)


def test_core_ops_meet_tight_bound_in_float64(rng):
    t = lambda *shape: leaf(rng.normal(size=shape))
    pos = lambda *shape: leaf(rng.uniform(0.5, 1.5, size=shape))
    cases = [
        (lambda x, k, b: conv2d(x, k, b, stride=2, padding=1), [t(2, 3, 7, 7), t(4, 3, 3, 3), t(4)]),
        (lambda x, k: conv_transpose2d(x, k, stride=2, padding=2, output_padding=1), [t(2, 2, 4, 4), t(2, 3, 5, 5)]),
        (lambda x, k: masked_conv2d(x, k, "A"), [t(1, 2, 6, 6), t(3, 2, 5, 5)]),
        (lambda x, b, g: gdn(x, b, g), [t(2, 3, 3, 3), pos(3), pos(3, 3)]),
        (lambda x, b, g: gdn(x, b, g, inverse=True), [t(2, 3, 3, 3), pos(3), pos(3, 3)]),
    ]
    for fn, inputs in cases:
        assert finite_difference_check(fn, inputs, step=1e-4) <= 1e-6
