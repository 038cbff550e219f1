import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stmodes.errors import InvalidInputError
from stmodes.numerics import (Tensor, backward, check_parameters, finite_difference_check,
                              no_grad, ops, relative_error)

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def grad_of(f, x):
    t = Tensor(x, requires_grad=True)
    backward(f(t))
    return t.grad


def test_sum_gradient_is_ones():
    np.testing.assert_array_equal(grad_of(ops.sum, np.array([1.0, 2.0, 3.0])), [1, 1, 1])


def test_square_gradient():
    g = grad_of(lambda x: ops.sum(ops.mul(x, x)), np.array([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(g, [2, 4, 6], rtol=0, atol=1e-15)


def test_gradients_accumulate_without_reset():
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    backward(ops.sum(ops.scale(x, 3.0)))
    backward(ops.sum(ops.scale(x, 3.0)))
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(InvalidInputError):
        backward(ops.mul(x, x))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = ops.sum(ops.mul(x, x))
    assert not y.requires_grad
    backward(y)
    assert x.grad is None


def test_shared_subexpression_gradient():
    # y = x*x used twice: d/dx sum(y + y) = 4x
    x = Tensor(np.array([0.5, -1.5]), requires_grad=True)
    y = ops.mul(x, x)
    backward(ops.sum(ops.add(y, y)))
    np.testing.assert_allclose(x.grad, 4 * x.data)


def test_broadcast_gradient_is_reduced():
    a = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.ones(4), requires_grad=True)
    backward(ops.sum(ops.mul(a, b)))
    assert b.grad.shape == (4,)
    np.testing.assert_array_equal(b.grad, np.full(4, 3.0))


def test_scalar_parameter_keeps_zero_dim_shape():
    phi = Tensor(np.array(-2.0), requires_grad=True)
    c = Tensor(np.array([[0.5, -1.0], [2.0, 0.1]]))
    backward(ops.sum(ops.soft_threshold(c, ops.softplus(phi))))
    assert phi.grad.shape == ()


def test_einsum_matches_numpy(rng):
    a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5))
    out = ops.einsum("bij,jk->bik", a, b)
    np.testing.assert_allclose(out.data, np.einsum("bij,jk->bik", a, b), atol=1e-13)


def test_einsum_rejects_repeated_index():
    with pytest.raises(InvalidInputError):
        ops.einsum("ii->i", np.eye(3))


def test_einsum_gradient_with_index_summed_inside_operand(rng):
    w = rng.standard_normal(4)
    err = finite_difference_check(lambda x: ops.sum(ops.einsum("bnct,t->bn", x, Tensor(w))),
                                  rng.standard_normal((2, 3, 2, 4)))
    assert err < 1e-7


@pytest.mark.parametrize("name, f", [
    ("sigmoid", lambda x: ops.sum(ops.mul(ops.sigmoid(x), Tensor(np.arange(12.0).reshape(3, 4))))),
    ("softplus", lambda x: ops.sum(ops.softplus(ops.scale(x, 2.0)))),
    ("softmax", lambda x: ops.sum(ops.mul(ops.softmax(x), Tensor(np.cos(np.arange(12.0)).reshape(3, 4))))),
    ("abs", lambda x: ops.mean(ops.abs(x))),
    ("relu", lambda x: ops.sum(ops.mul(ops.relu(x), x))),
    ("matmul", lambda x: ops.sum(ops.matmul(x, ops.transpose(x, (1, 0))))),
    ("reshape", lambda x: ops.sum(ops.mul(ops.reshape(x, (4, 3)), Tensor(np.arange(12.0).reshape(4, 3))))),
    ("mean_axis", lambda x: ops.sum(ops.mul(ops.mean(x, axis=0), Tensor(np.arange(4.0))))),
    ("soft_threshold", lambda x: ops.sum(ops.mul(ops.soft_threshold(x, 0.3), Tensor(np.arange(12.0).reshape(3, 4))))),
])
def test_operation_gradients_match_central_differences(name, f):
    x = np.random.default_rng(5).standard_normal((3, 4))
    # keep clear of the kinks of abs/relu/shrinkage
    x = np.where(np.abs(x) < 0.05, 0.4, x)
    x = np.where(np.abs(np.abs(x) - 0.3) < 0.05, 0.8, x)
    assert finite_difference_check(f, x) < 1e-6, name


def test_conv2d_matches_loop_oracle(rng):
    x = rng.standard_normal((2, 3, 4, 6))
    w = rng.standard_normal((4, 5, 1, 3))
    out = ops.conv2d(Tensor(x), Tensor(w)).data
    xp = np.pad(x, ((0, 0), (0, 0), (0, 0), (1, 1)))
    ref = np.zeros((2, 3, 5, 6))
    for b in range(2):
        for h in range(3):
            for o in range(5):
                for t in range(6):
                    ref[b, h, o, t] = sum(xp[b, h, c, t + j] * w[c, o, 0, j]
                                          for c in range(4) for j in range(3))
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv2d_gradients(rng):
    w = rng.standard_normal((3, 2, 3, 3))
    weights = Tensor(rng.standard_normal((2, 4, 2, 5)))
    assert finite_difference_check(
        lambda x: ops.sum(ops.mul(ops.conv2d(x, Tensor(w)), weights)),
        rng.standard_normal((2, 4, 3, 5))) < 1e-6
    x = rng.standard_normal((2, 4, 3, 5))
    assert finite_difference_check(
        lambda k: ops.sum(ops.mul(ops.conv2d(Tensor(x), k), weights)), w) < 1e-6


def test_conv2d_rejects_even_kernel():
    with pytest.raises(InvalidInputError):
        ops.conv2d(np.ones((1, 2, 3, 4)), np.ones((3, 3, 1, 2)))


def test_gradcheck_of_square_is_tight(rng):
    assert finite_difference_check(lambda x: ops.sum(ops.mul(x, x)), rng.standard_normal(7),
                                   step=1e-5) < 1e-7


def test_gradcheck_of_constant_softmax_row_sum(rng):
    x = rng.standard_normal((3, 4))
    np.testing.assert_allclose(grad_of(lambda t: ops.sum(ops.softmax(t)), x), 0.0, atol=1e-15)
    assert finite_difference_check(lambda t: ops.sum(ops.softmax(t)), x, step=1e-5) < 1e-7


def test_gradcheck_propagates_non_finite():
    with pytest.raises(FloatingPointError):
        finite_difference_check(lambda x: ops.sum(ops.scale(x, np.inf)), np.ones(2))


def test_gradcheck_rejects_bad_step():
    with pytest.raises(InvalidInputError):
        finite_difference_check(ops.sum, np.ones(2), step=0.0)


def test_check_parameters_restores_state(rng):
    a = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
    before = a.data.copy()
    report = check_parameters(lambda: ops.sum(ops.mul(a, a)), {"a": a})
    assert report["a"] < 1e-7
    np.testing.assert_array_equal(a.data, before)
    assert a.grad is None


def test_relative_error_uses_floor():
    assert relative_error(np.zeros(2), np.full(2, 1e-10)) == pytest.approx(1e-2)


@given(arrays(np.float64, (5,), elements=finite), arrays(np.float64, (5,), elements=finite),
       st.floats(-2, 2), st.floats(-2, 2))
def test_gradient_is_linear_in_the_loss(x, w, a, b):
    def grad(f):
        t = Tensor(x, requires_grad=True)
        backward(f(t))
        return t.grad
    f = lambda t: ops.sum(ops.mul(ops.sigmoid(t), Tensor(w)))  # noqa: E731
    g = lambda t: ops.sum(ops.mul(t, t))  # noqa: E731
    combined = grad(lambda t: ops.add(ops.scale(f(t), a), ops.scale(g(t), b)))
    np.testing.assert_allclose(combined, a * grad(f) + b * grad(g), rtol=0, atol=1e-10)


@given(arrays(np.float64, (3, 4), elements=finite))
def test_public_operations_stay_finite(x):
    for out in (ops.sigmoid(x), ops.softplus(x), ops.softmax(x), ops.soft_threshold(x, 0.5)):
        assert np.all(np.isfinite(out.data))
