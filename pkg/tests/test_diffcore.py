import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from mhdepth import diffcore as dc

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def test_softmax_uniform():
    out = dc.softmax(dc.Tensor(np.zeros(4)), axis=-1)
    np.testing.assert_allclose(out.data, [0.25] * 4)


def test_relu_values_and_zero_subgradient():
    x = dc.Tensor.param(np.array([-1.0, 2.0, 0.0]))
    y = dc.relu(x)
    np.testing.assert_array_equal(y.data, [0.0, 2.0, 0.0])
    dc.sum_(y).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


def test_matmul_identity(rng):
    a = rng.normal(size=(3, 3))
    np.testing.assert_array_equal(dc.matmul(np.eye(3), a).data, a)


def test_sum_of_squares_gradient():
    x = dc.Tensor.param(np.array([1.0, 2.0, 3.0]))
    dc.sum_(dc.square(x)).backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])


def test_softmax_sum_has_zero_gradient(rng):
    x = dc.Tensor.param(rng.normal(size=7))
    dc.sum_(dc.softmax(x, axis=-1)).backward()
    np.testing.assert_allclose(x.grad, 0.0, atol=1e-15)


def test_layernorm_mean_matches_central_differences(rng):
    c = rng.normal(size=(3, 5))
    x = rng.normal(size=(3, 5))
    assert dc.grad_check(lambda t: dc.mean(dc.layernorm(t) * c), x) < 1e-6


def test_grad_check_quadratic():
    assert dc.grad_check(lambda t: dc.sum_(t * t), np.array([3.0])) < 1e-8


def test_backward_requires_scalar():
    x = dc.Tensor.param(np.ones(3))
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_shared_subexpression_accumulates():
    x = dc.Tensor.param(np.array([2.0]))
    y = x * 3.0
    z = dc.sum_(y * y + y)  # 9x^2 + 3x
    z.backward()
    np.testing.assert_allclose(x.grad, [18 * 2.0 + 3.0])


def test_shape_mismatch_is_reported():
    with pytest.raises(ValueError, match="shape|broadcast"):
        dc.add(dc.Tensor(np.ones((2, 3))), dc.Tensor(np.ones((4, 5))))
    with pytest.raises(ValueError):
        dc.matmul(dc.Tensor(np.ones((2, 3))), dc.Tensor(np.ones((2, 3))))


def test_softmax_empty_axis_rejected():
    with pytest.raises(ValueError):
        dc.softmax(dc.Tensor(np.ones((2, 0))), axis=-1)


def test_grad_check_rejects_bad_inputs():
    with pytest.raises(ValueError), np.errstate(invalid="ignore"):
        dc.grad_check(lambda t: dc.sum_(dc.log(t)), np.array([-1.0]))
    with pytest.raises(ValueError):
        dc.grad_check(lambda t: dc.sum_(t), np.array([1.0]), step=0.0)


def test_gather_and_concat_gradients(rng):
    x = rng.normal(size=(4, 3))
    f = lambda t: dc.sum_(dc.concat([dc.gather(t, [2, 0, 2], axis=0), t * 2.0], axis=0) ** 2)
    assert dc.grad_check(f, x) < 1e-6


PRIMITIVES = {
    "add": lambda t, c: dc.sum_((t + c) * c),
    "sub": lambda t, c: dc.sum_((c - t) * c),
    "mul": lambda t, c: dc.sum_(t * c * t),
    "div": lambda t, c: dc.sum_(c / (dc.square(t) + 1.0)),
    "exp": lambda t, c: dc.sum_(dc.exp(t) * c),
    "log": lambda t, c: dc.sum_(dc.log(dc.square(t) + 0.5) * c),
    "relu": lambda t, c: dc.sum_(dc.relu(t) * c),
    "sigmoid": lambda t, c: dc.sum_(dc.sigmoid(t) * c),
    "softmax": lambda t, c: dc.sum_(dc.softmax(t, axis=0) * c),
    "layernorm": lambda t, c: dc.sum_(dc.layernorm(t) * c),
    "mean": lambda t, c: dc.sum_(dc.mean(t * c, axis=1) ** 2),
    "matmul": lambda t, c: dc.sum_(dc.matmul(t, dc.transpose(c)) ** 2),
    "reshape": lambda t, c: dc.sum_(dc.reshape(t, (-1,)) * c.reshape(-1)),
    "max": lambda t, c: dc.sum_(dc.max_(t * c, axis=0)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_on_100_random_inputs(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    f = PRIMITIVES[name]
    worst = 0.0
    for _ in range(100):
        x = rng.normal(size=(3, 4))
        c = rng.normal(size=(3, 4))
        if name == "relu":
            x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
        worst = max(worst, dc.grad_check(lambda t: f(t, c), x))
    assert worst < 1e-4


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
def test_softmax_rows_sum_to_one(x):
    s = dc.softmax(dc.Tensor(x * 40.0), axis=-1).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(s >= 0)


@given(hnp.arrays(np.float64, (2, 3), elements=finite), hnp.arrays(np.float64, (3,), elements=finite))
def test_broadcast_add_gradient_is_unbroadcast(a, b):
    ta, tb = dc.Tensor.param(a), dc.Tensor.param(b)
    dc.sum_(ta + tb).backward()
    np.testing.assert_array_equal(ta.grad, np.ones((2, 3)))
    np.testing.assert_array_equal(tb.grad, np.full(3, 2.0))
