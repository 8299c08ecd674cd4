import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vrcodec import tensor as T
from vrcodec.gradcheck import finite_difference_check, relative_error
from vrcodec.nn import Parameter
from vrcodec.optim import OptimizerConfig, adam_step
from vrcodec.tensor import NonFiniteError, Tensor, no_grad

from conftest import leaf


UNARY = {
    "exp": T.exp,
    "tanh": T.tanh,
    "sigmoid": T.sigmoid,
    "softplus": T.softplus,
    "neg": T.neg,
    "square": T.square,
    "ndtr": T.ndtr,
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name, rng):
    x = leaf(rng.normal(size=(3, 4)))
    assert finite_difference_check(UNARY[name], [x]) <= 1e-6


@pytest.mark.parametrize("name,fn", [("log", T.log), ("log2", T.log2), ("sqrt", T.sqrt)])
def test_positive_domain_gradients(name, fn, rng):
    x = leaf(rng.uniform(0.5, 2.0, size=(5,)))
    assert finite_difference_check(fn, [x]) <= 1e-6


def test_broadcast_binary_gradients(rng):
    a = leaf(rng.normal(size=(2, 3, 4)))
    b = leaf(rng.normal(size=(3, 1)))
    c = leaf(rng.uniform(1.0, 2.0, size=(4,)))
    fn = lambda a, b, c: T.div(T.mul(T.add(a, b), T.sub(a, b)), c)
    assert finite_difference_check(fn, [a, b, c]) <= 1e-6


def test_matmul_gradients_batched(rng):
    a = leaf(rng.normal(size=(2, 3, 4)))
    b = leaf(rng.normal(size=(4, 5)))
    assert finite_difference_check(T.matmul, [a, b]) <= 1e-6


def test_shape_ops_gradients(rng):
    x = leaf(rng.normal(size=(2, 3, 4)))
    fn = lambda x: T.concat([x[:, 1:, ::2].reshape(2, -1), T.take(x, [0, 0, 2], axis=1).transpose((0, 2, 1)).reshape(2, -1)], axis=1)
    assert finite_difference_check(fn, [x]) <= 1e-6


def test_reduction_gradients(rng):
    x = leaf(rng.normal(size=(3, 4, 5)))
    assert finite_difference_check(lambda x: T.mean(T.tsum(x, axis=2), axis=0), [x]) <= 1e-6
    assert finite_difference_check(lambda x: T.mean(x, axis=(0, 2), keepdims=True), [x]) <= 1e-6


def test_softplus_values():
    assert float(T.softplus(Tensor(0.0, dtype=np.float64)).data) == pytest.approx(math.log(2.0), abs=1e-12)
    assert abs(float(T.softplus(Tensor(50.0, dtype=np.float64)).data) - 50.0) <= 1e-6
    big = T.softplus(Tensor([1000.0, -1000.0], dtype=np.float64)).data
    assert np.all(np.isfinite(big)) and big[0] == 1000.0 and big[1] >= 0.0


def test_softplus_derivative_at_zero():
    x = leaf([0.0])
    T.softplus(x).backward(np.ones(1))
    assert x.grad[0] == pytest.approx(0.5, abs=1e-12)
    assert finite_difference_check(T.softplus, [x]) <= 1e-9


def test_gradient_accumulates_over_shared_use():
    x = leaf([3.0])
    y = T.add(T.mul(x, x), x)  # x^2 + x
    y.backward(np.ones(1))
    assert x.grad[0] == pytest.approx(7.0)


def test_no_grad_records_nothing():
    x = leaf([1.0, 2.0])
    with no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad
    assert T.grad_enabled()


def test_straight_through_is_identity():
    x = leaf([0.2, 1.7])
    y = T.straight_through(x, np.array([0.0, 2.0]))
    np.testing.assert_array_equal(y.data, [0.0, 2.0])
    y.backward(np.array([3.0, -1.0]))
    np.testing.assert_array_equal(x.grad, [3.0, -1.0])


def test_clamp_min_blocks_gradient_below_floor():
    x = leaf([0.5, -1.0])
    T.clamp_min(x, 0.0).backward(np.ones(2))
    np.testing.assert_array_equal(x.grad, [1.0, 0.0])


def test_check_finite_raises():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan]).check_finite()


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4)), elements=st.floats(-3, 3)))
def test_sum_gradient_is_ones(values):
    x = leaf(values)
    T.tsum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones_like(values))


# -- finite-difference oracle itself -----------------------------------------


def test_gradcheck_exact_on_linear_map(rng):
    w = rng.normal(size=(4, 3))
    x = leaf(rng.normal(size=(3,)))
    # central differences are exact for linear maps at any step, so use a large one
    assert finite_difference_check(lambda x: T.matmul(Tensor(w), x), [x], step=1e-2) <= 1e-10


def test_gradcheck_softplus_random_points(rng):
    x = leaf(rng.normal(scale=3.0, size=(20,)))
    assert finite_difference_check(T.softplus, [x]) <= 1e-6


def test_gradcheck_flags_wrong_gradient():
    def doubled(x):
        return T._result(x.data * 1.0, (x,), lambda g: (2.0 * g,))

    x = leaf([0.3, -1.2, 2.0])
    err = finite_difference_check(doubled, [x], upstream=np.ones(3))
    # |2g - g| / (|2g| + |g|) = 1/3
    assert err == pytest.approx(1.0 / 3.0, abs=1e-6)


def test_relative_error_formula():
    assert relative_error(2.0, 1.0, eps=0.0) == pytest.approx(1.0 / 3.0)


# -- Adam --------------------------------------------------------------------


def test_adam_zero_gradient_is_fixed_point():
    p = Parameter(np.array([1.0, -2.0]), dtype=np.float64)
    p.adam.m[:] = [0.5, 0.5]
    p.grad = np.zeros(2)
    adam_step([p], OptimizerConfig(0.1))
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    np.testing.assert_allclose(p.adam.m, [0.45, 0.45])
    assert p.adam.step == 1


def test_adam_first_step_moves_by_learning_rate():
    p = Parameter(np.array([0.0, 0.0]), dtype=np.float64)
    p.grad = np.array([3.0, -0.01])
    adam_step([p], OptimizerConfig(0.01, epsilon=1e-12))
    np.testing.assert_allclose(p.data, [-0.01, 0.01], rtol=1e-6)


def test_adam_quadratic_simulation():
    p = Parameter(np.array([1.0]), dtype=np.float64)
    cfg = OptimizerConfig(0.05)
    for _ in range(100):
        p.grad = 2.0 * p.data
        adam_step([p], cfg)
    assert abs(p.data[0]) < 0.2


def test_adam_matches_reference_recursion():
    # independent recursion written out in plain floats
    cfg = OptimizerConfig(0.1, beta1=0.8, beta2=0.9, epsilon=1e-8)
    p = Parameter(np.array([0.7]), dtype=np.float64)
    grads = [0.3, -0.2, 0.5]
    m = v = 0.0
    x = 0.7
    for t, g in enumerate(grads, start=1):
        p.grad = np.array([g])
        adam_step([p], cfg)
        m = 0.8 * m + 0.2 * g
        v = 0.9 * v + 0.1 * g * g
        x -= 0.1 * (m / (1 - 0.8**t)) / (math.sqrt(v / (1 - 0.9**t)) + 1e-8)
    assert p.data[0] == pytest.approx(x, abs=1e-12)


def test_adam_schedule():
    cfg = OptimizerConfig(1e-3, schedule=[(10, 5e-4), (20, 1e-4)])
    assert [cfg.lr_at(s) for s in (0, 9, 10, 19, 25)] == [1e-3, 1e-3, 5e-4, 5e-4, 1e-4]
    with pytest.raises(ValueError):
        OptimizerConfig(schedule=[(10, 1e-3), (5, 1e-4)])
    with pytest.raises(ValueError):
        OptimizerConfig(schedule=[(10, 0.0)])


def test_adam_nan_aborts_without_touching_parameters():
    a = Parameter(np.array([1.0]), dtype=np.float64)
    b = Parameter(np.array([2.0]), dtype=np.float64)
    a.grad = np.array([1.0])
    b.grad = np.array([np.nan])
    with pytest.raises(NonFiniteError):
        adam_step([a, b], OptimizerConfig(0.1))
    assert a.data[0] == 1.0 and a.adam.step == 0


def test_adam_missing_gradient():
    p = Parameter(np.zeros(2))
    with pytest.raises(ValueError):
        adam_step([p], OptimizerConfig())
