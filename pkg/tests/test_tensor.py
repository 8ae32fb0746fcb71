import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from geonorm.tensor import (
    ComputationTape, DenseTensor, Parameter, Precision, backward, cross_entropy, elementwise, matmul,
    reduce_norm_lastdim, reduce_sum, softmax_lastdim, zero_grad
)
from geonorm.utils import ContractError, DimensionError, DomainError, TokenIndexError


def wide(values):
    return DenseTensor(values, Precision.WIDE)


def test_matmul_examples():
    np.testing.assert_array_equal(matmul(wide([[1, 2], [3, 4]]), wide(np.eye(2))).data, [[1, 2], [3, 4]])
    np.testing.assert_array_equal(matmul(wide(np.eye(2)), wide([[5], [7]])).data, [[5], [7]])
    np.testing.assert_array_equal(matmul(wide([[1, 2]]), wide([[3], [4]])).data, [[11]])


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError) as e:
        matmul(wide(np.ones((2, 3))), wide(np.ones((4, 5))))
    assert '[2, 3]' in str(e.value) and '[4, 5]' in str(e.value)


def test_matmul_gradients():
    a = Parameter(np.array([[1.0, 2.0]]), 'a')
    b = Parameter(np.array([[3.0], [4.0]]), 'b')
    with ComputationTape():
        backward(reduce_sum(matmul(a.value, b.value)))
    np.testing.assert_array_equal(a.grad.data, [[3.0, 4.0]])
    np.testing.assert_array_equal(b.grad.data, [[1.0], [2.0]])


def test_reduce_norm_lastdim_examples():
    assert reduce_norm_lastdim(wide([3.0, 4.0])).data.tolist() == [5.0]
    assert reduce_norm_lastdim(wide([0.0, 0.0, 0.0])).data.tolist() == [0.0]
    assert reduce_norm_lastdim(wide([1.0, 1.0, 1.0, 1.0])).data.tolist() == [2.0]


def test_norm_gradient_of_zero_vector_is_zero():
    x = Parameter(np.zeros(3), 'x')
    with ComputationTape():
        backward(reduce_sum(reduce_norm_lastdim(x.value)))
    np.testing.assert_array_equal(x.grad.data, np.zeros(3))


def test_elementwise_examples():
    assert elementwise(wide(0.0), 'cos').item() == 1.0
    assert elementwise(wide(math.pi / 2), 'clamp_max', math.pi / 4).item() == pytest.approx(0.7854, abs=1e-4)
    assert elementwise(wide(math.pi / 2), 'sin').item() == pytest.approx(1.0)


def test_sqrt_of_negative_is_domain_error():
    with pytest.raises(DomainError):
        elementwise(wide([1.0, -1.0]), 'sqrt')


def test_elementwise_rejects_non_finite_parameter():
    with pytest.raises(ContractError):
        elementwise(wide([1.0]), 'clamp_max', math.inf)
    with pytest.raises(ContractError):
        elementwise(wide([1.0]), 'scale')


def test_clamp_gradient_regions():
    x = Parameter(np.array([0.5, 1.0, 2.0]), 'x')
    with ComputationTape():
        backward(reduce_sum(elementwise(x.value, 'clamp_max', 1.0)))
    # boundary passes the gradient through
    np.testing.assert_array_equal(x.grad.data, [1.0, 1.0, 0.0])


def test_softmax_examples():
    np.testing.assert_allclose(softmax_lastdim(wide([0.0, 0.0, 0.0, 0.0])).data, [0.25] * 4)
    np.testing.assert_allclose(softmax_lastdim(wide([1000.0, 1000.0])).data, [0.5, 0.5])
    np.testing.assert_allclose(softmax_lastdim(wide([0.0, math.log(3)])).data, [0.25, 0.75])


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=16))
def test_softmax_rows_sum_to_one(values):
    assert softmax_lastdim(wide(values)).data.sum() == pytest.approx(1.0, abs=1e-12)


def test_cross_entropy_examples():
    assert cross_entropy(wide(np.zeros((1, 4))), np.array([2])).item() == pytest.approx(1.3863, abs=1e-4)
    logits = np.zeros((2, 5))
    targets = np.array([1, 3])
    logits[[0, 1], targets] = 1000
    assert cross_entropy(wide(logits), targets).item() == pytest.approx(0.0, abs=1e-12)
    assert cross_entropy(wide(np.zeros((3, 256))), np.array([0, 7, 255])).item() == pytest.approx(math.log(256))


def test_cross_entropy_out_of_range_target():
    with pytest.raises(TokenIndexError):
        cross_entropy(wide(np.zeros((1, 4))), np.array([4]))
    with pytest.raises(TokenIndexError):
        cross_entropy(wide(np.zeros((1, 4))), np.array([-1]))


def test_backward_examples():
    x = Parameter(3.0, 'x')
    with ComputationTape():
        backward(x.value * x.value)
    assert x.grad.item() == 6.0

    c = Parameter(2.0, 'c')
    with ComputationTape():
        backward(DenseTensor(5.0) + 0.0)
    assert c.grad.item() == 0.0

    v = Parameter(np.array([3.0, 4.0]), 'v')
    with ComputationTape():
        backward(reduce_sum(reduce_norm_lastdim(v.value)))
    np.testing.assert_allclose(v.grad.data, [0.6, 0.8])


def test_backward_needs_scalar_loss():
    x = Parameter(np.ones(2), 'x')
    with ComputationTape():
        with pytest.raises(ContractError):
            backward(x.value * 2.0)


def test_backward_accumulates_until_zero_grad():
    x = Parameter(2.0, 'x')
    for _ in range(2):
        with ComputationTape():
            backward(x.value * 3.0)
    assert x.grad.item() == 6.0
    zero_grad([x])
    assert x.grad.item() == 0.0


def test_backward_is_deterministic():
    rng = np.random.default_rng(0)
    w = Parameter(rng.normal(size=(4, 3)), 'w')
    x = DenseTensor(rng.normal(size=(5, 4)))
    grads = []
    for _ in range(2):
        zero_grad([w])
        with ComputationTape():
            backward(reduce_sum(elementwise(matmul(x, w.value), 'tanh')))
        grads.append(w.grad.data.copy())
    assert np.array_equal(grads[0], grads[1])


def test_broadcast_gradient_is_reduced():
    bias = Parameter(np.zeros(3), 'bias')
    x = DenseTensor(np.ones((2, 4, 3)))
    with ComputationTape():
        backward(reduce_sum(x + bias.value))
    np.testing.assert_array_equal(bias.grad.data, [8.0, 8.0, 8.0])


def test_tape_records_nodes_in_order():
    x = Parameter(np.array([1.0, 2.0]), 'x')
    with ComputationTape() as tape:
        y = elementwise(x.value, 'square')
        reduce_sum(y)
    assert tape.ops() == ['square', 'reduce_sum']


def test_no_tape_no_recording():
    x = Parameter(np.array([1.0, 2.0]), 'x')
    y = x.value * 2.0
    assert not y.requires_grad


def test_narrow_precision_is_float32():
    t = DenseTensor([1.0, 2.0], Precision.NARROW)
    assert t.data.dtype == np.float32
    assert (t * 2.0).precision is Precision.NARROW
