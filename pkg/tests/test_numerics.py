import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from promptmap.errors import ContractError, DimensionError, NumericError, ValidationError
from promptmap.numerics import (
    Tensor,
    backward,
    broadcast_to,
    concat,
    cross_entropy,
    default_dtype,
    einsum,
    exp,
    gather_tokens,
    gelu,
    get_default_dtype,
    layer_norm,
    log,
    matmul,
    mean,
    no_grad,
    put_slots,
    relu,
    softmax,
    sum_,
    take_slots,
    trace,
)
from promptmap.numerics.gradcheck import check_gradients, numeric_grad, relative_error


def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True)


# matmul ---------------------------------------------------------------

def test_matmul_identity():
    m = np.arange(9.0).reshape(3, 3)
    out = matmul(Tensor(np.eye(3)), Tensor(m))
    assert np.array_equal(out.data, m)


def test_matmul_hand_example():
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [1.0]]))
    assert np.array_equal(out.data, [[2.0], [4.0]])


def test_matmul_grad_of_sum(rng):
    a, b = leaf(rng, 4, 5), leaf(rng, 5, 3)
    matmul(a, b).sum().backward()
    # d sum(ab) / da = row-broadcast of b's row sums
    expected = np.broadcast_to(b.data.sum(axis=1), (4, 5))
    assert np.allclose(a.grad, expected)
    err = check_gradients(lambda: matmul(a, b).sum(), [a, b])
    assert max(err) < 1e-6


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(DimensionError):
        matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 1))))


def test_batched_matmul_grads(rng):
    a, b, c = leaf(rng, 2, 3, 4, 5), leaf(rng, 5, 2), leaf(rng, 2, 1, 2, 4)
    fn = lambda: (matmul(matmul(a, b), c.reshape(2, 1, 2, 4)) * 0.5).sum()  # noqa: E731
    assert max(check_gradients(fn, [a, b, c])) < 1e-6


# softmax --------------------------------------------------------------

def test_softmax_uniform():
    out = softmax(Tensor(np.zeros(3)))
    assert np.allclose(out.data, 1 / 3, atol=1e-15)


def test_softmax_exact_exponentials():
    out = softmax(Tensor([math.log(2), 0.0, 0.0]))
    assert np.allclose(out.data, [0.5, 0.25, 0.25], atol=1e-15)


def test_softmax_random_vector(rng):
    x = leaf(rng, 7)
    w = rng.normal(size=7)
    out = softmax(x)
    assert abs(out.data.sum() - 1) < 1e-12
    assert max(check_gradients(lambda: (softmax(x) * w).sum(), [x])) < 1e-6


def test_softmax_nan_input():
    with pytest.raises(NumericError):
        softmax(Tensor([0.0, np.nan]))


def test_softmax_mask_gives_exact_zeros(rng):
    x = leaf(rng, 3, 5)
    mask = rng.random((3, 5)) > 0.4
    mask[:, 0] = True
    out = softmax(x, axis=-1, mask=mask)
    assert np.all(out.data[~mask] == 0.0)
    assert np.allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)
    w = rng.normal(size=(3, 5))
    assert max(check_gradients(lambda: (softmax(x, -1, mask) * w).sum(), [x])) < 1e-6


def test_softmax_empty_mask_slice():
    with pytest.raises(ValidationError):
        softmax(Tensor(np.zeros((2, 3))), mask=np.array([True, False, False])[None] & np.array([[True], [False]]))


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6),
                  elements=st.floats(-50, 50)))
def test_softmax_is_a_distribution(x):
    out = softmax(Tensor(x), axis=-1).data
    assert np.all(out >= 0) and np.all(out <= 1)
    assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-12)


# layer norm -----------------------------------------------------------

def test_layer_norm_constant_row():
    out = layer_norm(Tensor(np.full((1, 4), 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)), 1e-6)
    assert np.array_equal(out.data, np.zeros((1, 4)))


def test_layer_norm_already_normalised():
    out = layer_norm(Tensor([[-1.0, 1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), 1e-12)
    assert np.allclose(out.data, [[-1.0, 1.0]], atol=1e-10)


def test_layer_norm_statistics(rng):
    x = rng.normal(3.0, 2.0, size=(5, 16))
    out = layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16)), 1e-12).data
    assert np.abs(out.mean(axis=-1)).max() < 1e-10
    assert np.abs(out.var(axis=-1) - 1).max() < 1e-6


def test_layer_norm_grads(rng):
    x, g, b = leaf(rng, 3, 6), leaf(rng, 6), leaf(rng, 6)
    w = rng.normal(size=(3, 6))
    assert max(check_gradients(lambda: (layer_norm(x, g, b, 1e-5) * w).sum(), [x, g, b])) < 1e-6


def test_layer_norm_dim_mismatch():
    with pytest.raises(DimensionError):
        layer_norm(Tensor(np.ones((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))


# relu / gelu ----------------------------------------------------------

def test_relu_examples():
    assert np.array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
    x = Tensor(-np.ones(4) - 1, requires_grad=True)
    relu(x).sum().backward()
    assert np.array_equal(relu(x).data, np.zeros(4))
    assert np.array_equal(x.grad, np.zeros(4))


def test_relu_subgradient_at_zero():
    x = Tensor(np.zeros(3), requires_grad=True)
    relu(x).sum().backward()
    assert np.array_equal(x.grad, np.zeros(3))


def test_relu_gradient_mask(rng):
    data = rng.normal(size=(4, 5))
    data[np.abs(data) < 1e-3] = 0.5  # keep away from the kink
    x = Tensor(data, requires_grad=True)
    relu(x).sum().backward()
    assert np.array_equal(x.grad, (data > 0).astype(float))
    num = numeric_grad(lambda: relu(x).sum(), x)
    assert relative_error(x.grad, num) < 1e-6


def test_gelu_grads(rng):
    x = leaf(rng, 4, 4)
    w = rng.normal(size=(4, 4))
    assert max(check_gradients(lambda: (gelu(x) * w).sum(), [x])) < 1e-6
    assert np.allclose(gelu(Tensor([0.0])).data, 0.0)


# cross entropy --------------------------------------------------------

def test_cross_entropy_uniform():
    loss = cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 3])
    assert abs(float(loss.data) - math.log(4)) < 1e-15


def test_cross_entropy_margin_limit():
    losses = []
    for margin in (1.0, 10.0, 40.0):
        logits = np.zeros((2, 3))
        logits[[0, 1], [2, 0]] = margin
        losses.append(float(cross_entropy(Tensor(logits), [2, 0]).data))
    assert losses[0] > losses[1] > losses[2] >= 0
    assert losses[1] > 0
    assert losses[2] < 1e-15


def test_cross_entropy_grads(rng):
    z = leaf(rng, 5, 3)
    labels = rng.integers(0, 3, size=5)
    assert max(check_gradients(lambda: cross_entropy(z, labels), [z])) < 1e-6


def test_cross_entropy_bad_labels():
    with pytest.raises(ValidationError):
        cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])
    with pytest.raises(ValidationError):
        cross_entropy(Tensor(np.zeros((2, 3))), [0, -1])


# shape ops and gathers ------------------------------------------------

def test_elementwise_and_shape_op_grads(rng):
    a, b = leaf(rng, 3, 4), leaf(rng, 4)
    c = Tensor(rng.uniform(0.5, 2.0, size=(3, 1)), requires_grad=True)
    w = rng.normal(size=(4, 3))

    def fn():
        y = (a - b) * c + exp(a * 0.1) / c - log(c) * 2.0
        y = broadcast_to(y.reshape(1, 3, 4), (2, 3, 4)).transpose(0, 2, 1)
        y = concat([y[:, :2], y[:, 2:] * 3.0], axis=1)
        return (mean(y, axis=0) * w).sum() + sum_(a, axis=1).sum()

    assert max(check_gradients(fn, [a, b, c])) < 1e-6


def test_einsum_grads(rng):
    a, b = leaf(rng, 2, 3, 4), leaf(rng, 2, 4, 5)
    w = rng.normal(size=(2, 3, 5))
    fn = lambda: (einsum("bij,bjk->bik", a, b) * w).sum()  # noqa: E731
    assert max(check_gradients(fn, [a, b])) < 1e-6
    with pytest.raises(ValidationError):
        einsum("ij,jk->i", a[0], b[0])


def test_advanced_getitem_accumulates(rng):
    x = leaf(rng, 5, 2)
    idx = np.array([0, 0, 3])
    x[idx].sum().backward()
    assert np.array_equal(x.grad[:, 0], [2.0, 0.0, 0.0, 1.0, 0.0])


def test_gather_tokens(rng):
    x = leaf(rng, 2, 6, 3)
    index = np.array([[5, 0], [0, 2]])
    out = gather_tokens(x, index)
    assert out.shape == (2, 2, 2, 3)
    assert np.array_equal(out.data[1, 0, 0], x.data[1, 5])
    w = rng.normal(size=out.shape)
    assert max(check_gradients(lambda: (gather_tokens(x, index) * w).sum(), [x])) < 1e-6
    with pytest.raises(DimensionError):
        gather_tokens(x, np.array([6]))


def test_take_and_put_slots(rng):
    x = leaf(rng, 2, 3, 7)
    index = np.array([4, 0, 6, 0, 2])
    valid = np.array([True, True, True, False, True])
    out = take_slots(x, index, valid)
    assert out.shape == (2, 3, 5)
    assert np.array_equal(out.data[..., 3], np.zeros((2, 3)))
    assert np.array_equal(out.data[..., 0], x.data[..., 4])
    w = rng.normal(size=out.shape)
    assert max(check_gradients(lambda: (take_slots(x, index, valid) * w).sum(), [x])) < 1e-6

    y = leaf(rng, 2, 5)
    back = put_slots(y, index, valid, 7)
    assert back.shape == (2, 7)
    assert np.array_equal(back.data[:, 4], y.data[:, 0])
    assert np.array_equal(back.data[:, [1, 3, 5]], np.zeros((2, 3)))
    w = rng.normal(size=(2, 7))
    assert max(check_gradients(lambda: (put_slots(y, index, valid, 7) * w).sum(), [y])) < 1e-6


def test_slots_reject_collisions():
    with pytest.raises(ValidationError):
        take_slots(Tensor(np.ones(4)), np.array([1, 1]), np.array([True, True]))


# tape -----------------------------------------------------------------

def test_backward_sum_and_square(rng):
    x = leaf(rng, 3, 2)
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones((3, 2)))
    x.grad = None
    (x * x).sum().backward()
    assert np.allclose(x.grad, 2 * x.data)


def test_backward_requires_scalar(rng):
    with pytest.raises(ContractError):
        backward(leaf(rng, 3) * 2.0)


def test_backward_visits_each_node_once(rng):
    x = leaf(rng, 4)
    y = x * 2.0
    z = y * y + y  # y is shared
    loss = z.sum()
    order = trace(loss)
    assert len(order) == len({id(n) for n in order})
    ids = [id(t) for t in order]
    assert ids[-1] == id(loss)
    visited = backward(loss)
    assert len(visited) == len({id(n) for n in visited})
    assert np.allclose(x.grad, 2 * (2 * y.data * 1 + 1))


def test_topological_order(rng):
    x = leaf(rng, 3)
    a = x * 3.0
    b = a + x
    loss = (a * b).sum()
    order = trace(loss)
    pos = {id(t): i for i, t in enumerate(order)}
    for node in order:
        for parent in node._parents:
            if id(parent) in pos:
                assert pos[id(parent)] < pos[id(node)]


def test_frozen_tensor_grad_untouched(rng):
    frozen = Tensor(rng.normal(size=(3, 3)))
    x = leaf(rng, 3)
    sentinel = frozen.grad
    (matmul(frozen, x.reshape(3, 1))).sum().backward()
    assert frozen.grad is sentinel is None
    assert x.grad is not None


def test_unreachable_leaf_has_no_grad(rng):
    x, y = leaf(rng, 2), leaf(rng, 2)
    (x * 2.0).sum().backward()
    assert y.grad is None


def test_no_grad_records_nothing(rng):
    x = leaf(rng, 3)
    with no_grad():
        y = x * 2.0
    assert y._parents == () or not y.requires_grad


def test_non_finite_results_raise():
    with pytest.raises(NumericError):
        exp(Tensor([1000.0]))
    with pytest.raises(NumericError):
        Tensor([1.0]) / Tensor([0.0])
    with pytest.raises(NumericError):
        log(Tensor([0.0]))


def test_grad_matches_shape(rng):
    x = leaf(rng, 2, 3)
    (broadcast_to(x, (4, 2, 3)) * 1.5).sum().backward()
    assert x.grad.shape == x.shape
    assert np.allclose(x.grad, 6.0)


def test_dtype_selection():
    assert get_default_dtype() == np.float64
    with default_dtype(np.float32):
        t = Tensor([1.0, 2.0])
        assert t.dtype == np.float32
        assert (t * 2.0).dtype == np.float32
    assert Tensor([1.0]).dtype == np.float64


def test_default_dtype_is_per_thread():
    seen = {}

    def worker():
        seen["dtype"] = get_default_dtype()

    with default_dtype(np.float32):
        th = threading.Thread(target=worker)
        th.start()
        th.join()
    assert seen["dtype"] == np.float64


def test_deterministic_forward(rng):
    data = rng.normal(size=(4, 4))
    outs = [softmax(matmul(Tensor(data), Tensor(data.T))).data for _ in range(2)]
    assert np.array_equal(outs[0], outs[1])
