import numpy as np
import pytest

from himosa import tensor as T
from himosa.errors import ContractError, DimensionError
from himosa.oracle import finite_diff_grad
from himosa.tensor import Tensor


def test_add_broadcast_grad_reduces_to_operand_shape():
    a = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.arange(4.0), requires_grad=True)
    T.backward(T.sum(a + b))
    assert a.grad.shape == (3, 4)
    np.testing.assert_array_equal(b.grad, np.full(4, 3.0))


def test_leaf_gradients_accumulate_across_backward_calls():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    T.backward(T.sum(a * a))
    T.backward(T.sum(a * a))
    np.testing.assert_array_equal(a.grad, 4 * a.data)


def test_shared_subexpression_counts_both_paths():
    a = Tensor(np.array([3.0]), requires_grad=True)
    b = a * a
    T.backward(T.sum(b + b))
    np.testing.assert_array_equal(a.grad, [12.0])


def test_backward_needs_scalar():
    a = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        T.backward(a * a)


def test_matmul_shape_error_names_operands():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 5)))


def test_no_grad_records_nothing():
    a = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = a * a
    assert not y.requires_grad and y.is_leaf


def test_mac_counter():
    with T.count_macs() as c:
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((3, 5)))
    assert c.macs == 30


def test_softmax_rows_stable_and_normalized():
    x = Tensor(np.array([[1000.0, 1000.0], [-1000.0, 0.0]]))
    s = T.softmax_rows(x).data
    np.testing.assert_allclose(s.sum(axis=1), 1.0, rtol=0, atol=1e-15)
    np.testing.assert_allclose(s[0], [0.5, 0.5], rtol=0, atol=1e-15)


def test_sigmoid_extremes_finite():
    s = T.sigmoid(Tensor(np.array([-800.0, 0.0, 800.0]))).data
    np.testing.assert_array_equal(s, [0.0, 0.5, 1.0])


def test_abs_subgradient_zero_at_tie():
    a = Tensor(np.array([-2.0, 0.0, 3.0]), requires_grad=True)
    T.backward(T.sum(T.abs(a)))
    np.testing.assert_array_equal(a.grad, [-1.0, 0.0, 1.0])


def test_max_picks_first_argmax():
    a = Tensor(np.array([[1.0, 5.0, 5.0]]), requires_grad=True)
    T.backward(T.sum(T.max(a, axis=1)))
    np.testing.assert_array_equal(a.grad, [[0.0, 1.0, 0.0]])


def test_finite_difference_oracle_trivial_cases():
    x = np.random.default_rng(0).standard_normal(7)
    np.testing.assert_allclose(finite_diff_grad(lambda: x.sum(), x), np.ones(7), rtol=0, atol=1e-9)
    np.testing.assert_allclose(finite_diff_grad(lambda: 0.5 * (x * x).sum(), x), x, rtol=0, atol=1e-9)


def test_finite_difference_reports_nonfinite_index():
    x = np.array([0.0, 1.0])
    with pytest.raises(FloatingPointError, match="index 1"), np.errstate(invalid="ignore"):
        finite_diff_grad(lambda: np.log(x[1] - 1.0 + 1e-7) + x[0], x)


@pytest.mark.parametrize("seed", range(5))
def test_index_transpose_reshape_gradients(seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    R = rng.standard_normal((2, 3))

    def f():
        return T.sum(a.T[1:3].reshape(2, 3) * R)
    T.backward(f())
    with T.no_grad():
        fd = finite_diff_grad(lambda: f().data, a.data)
    np.testing.assert_allclose(a.grad, fd, rtol=0, atol=1e-8)
