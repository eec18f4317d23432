import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from deformable_hmr.errors import DimensionError
from deformable_hmr.gradcheck import grad_check
from deformable_hmr.tensor import Tensor, concat, cross, stack

finite = st.floats(-3, 3, allow_nan=False)


def test_leaf_grad_only_on_leaves():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = a * 3.0
    (b * b).sum().backward()
    np.testing.assert_allclose(a.grad, 18.0 * a.data)
    assert b.grad is None


def test_gradient_accumulates_over_reuse():
    a = Tensor(2.0, requires_grad=True)
    (a * a * a + a).backward()
    assert a.grad == pytest.approx(3 * 4.0 + 1.0)


def test_broadcast_gradient_is_reduced():
    a = Tensor(np.ones((3, 1)), requires_grad=True)
    b = Tensor(np.ones((1, 4)), requires_grad=True)
    (a + b).sum().backward()
    np.testing.assert_array_equal(a.grad, np.full((3, 1), 4.0))
    np.testing.assert_array_equal(b.grad, np.full((1, 4), 3.0))


def test_getitem_scatter_with_repeats():
    a = Tensor(np.arange(4.0), requires_grad=True)
    a[np.array([0, 0, 3])].sum().backward()
    np.testing.assert_array_equal(a.grad, [2.0, 0.0, 0.0, 1.0])


def test_no_grad_for_constants():
    a = Tensor(np.ones(3))
    b = Tensor(np.ones(3), requires_grad=True)
    (a * b).sum().backward()
    assert a.grad is None


def test_matmul_shape_error():
    with pytest.raises((DimensionError, ValueError)):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_cross_matches_numpy(rng):
    a, b = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    np.testing.assert_allclose(cross(Tensor(a), Tensor(b)).data, np.cross(a, b), atol=1e-15)


def test_concat_stack_roundtrip(rng):
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    np.testing.assert_array_equal(concat([Tensor(a), Tensor(b)], axis=0).data, np.concatenate([a, b]))
    np.testing.assert_array_equal(stack([Tensor(a), Tensor(b)], axis=1).data, np.stack([a, b], axis=1))


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4, 2), elements=finite))
def test_composite_gradients_property(x, w):
    xt, wt = Tensor(x.copy(), requires_grad=True), Tensor(w.copy(), requires_grad=True)

    def f():
        y = (xt @ wt).tanh() * 2.0 - (xt * xt + 1.0).log().sum(axis=1, keepdims=True)
        return (y.exp() / (wt.softplus().sum() + 1.0)).mean()

    assert grad_check(f, [xt, wt]) < 1e-5
