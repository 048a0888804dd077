from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from expertroute import tensor as T
from expertroute.errors import DomainError, ShapeError, TapeError

from gradcheck import finite_difference, relative_error


def grad_of(build_loss, x: np.ndarray) -> np.ndarray:
    """Analytic gradient of build_loss(Tensor) w.r.t. x via one tape."""
    t = T.Tensor(x, requires_grad=True)
    tape = T.Tape()
    with tape:
        loss = build_loss(t)
    tape.backward(loss)
    return t.grad


def fd_of(build_loss, x: np.ndarray) -> np.ndarray:
    def f(arr):
        return float(build_loss(T.Tensor(arr)).data)

    return finite_difference(f, x)


# ---------------------------------------------------------------- matmul


def test_matmul_identity():
    a = T.Tensor(np.eye(2))
    b = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(a, b).data, [[1.0, 2.0], [3.0, 4.0]])


def test_matmul_direct_case():
    a = T.Tensor([[1.0, 0.0], [0.0, 0.0]])
    b = T.Tensor([[5.0], [7.0]])
    np.testing.assert_array_equal(T.matmul(a, b).data, [[5.0], [0.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))


def test_matmul_grad_is_row_sums_of_b():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 4))
    b = T.Tensor(rng.normal(size=(4, 2)))
    g = grad_of(lambda t: T.tsum(T.matmul(t, b)), a)
    # d sum(A B) / dA has every row equal to the row-sums of B
    expected = np.tile(b.data.sum(axis=1), (3, 1))
    np.testing.assert_allclose(g, expected, rtol=1e-12)
    fd = fd_of(lambda t: T.tsum(T.matmul(t, b)), a)
    assert relative_error(g, fd) < 1e-4


def test_matmul_batched_grads_match_fd():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(2, 3, 4))
    b = rng.normal(size=(4, 5))
    ga = grad_of(lambda t: T.tsum(T.mul(T.matmul(t, T.Tensor(b)), T.Tensor(a @ b))), a)
    fa = fd_of(lambda t: T.tsum(T.mul(T.matmul(t, T.Tensor(b)), T.Tensor(a @ b))), a)
    assert relative_error(ga, fa) < 1e-4
    gb = grad_of(lambda t: T.tsum(T.matmul(T.Tensor(a), t)), b)
    fb = fd_of(lambda t: T.tsum(T.matmul(T.Tensor(a), t)), b)
    assert relative_error(gb, fb) < 1e-4


# ----------------------------------------------------------- elementwise


def test_sigmoid_at_zero_is_half():
    assert T.sigmoid(T.Tensor(0.0)).item() == 0.5


def test_add_basic():
    np.testing.assert_array_equal(
        T.add(T.Tensor([1.0, 2.0]), T.Tensor([3.0, 4.0])).data, [4.0, 6.0]
    )


def test_sigmoid_grad_at_zero():
    g = grad_of(lambda t: T.tsum(T.sigmoid(t)), np.zeros(1))
    np.testing.assert_allclose(g, [0.25], atol=1e-12)
    fd = fd_of(lambda t: T.tsum(T.sigmoid(t)), np.zeros(1))
    assert relative_error(g, fd) < 1e-4


def test_sigmoid_extreme_inputs_do_not_overflow():
    out = T.sigmoid(T.Tensor([-1e4, 1e4])).data
    np.testing.assert_allclose(out, [0.0, 1.0], atol=1e-300)


def test_log_domain_error():
    with pytest.raises(DomainError):
        T.log(T.Tensor([1.0, 0.0]))


def test_broadcast_rejected_when_incompatible():
    with pytest.raises(ShapeError):
        T.add(T.Tensor(np.ones(3)), T.Tensor(np.ones(4)))


@pytest.mark.parametrize("op", [T.add, T.sub, T.mul, T.div])
def test_binary_op_grads_match_fd(op):
    rng = np.random.default_rng(2)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4,)) + 3.0  # keep away from zero for div
    ga = grad_of(lambda t: T.tsum(T.mul(op(t, T.Tensor(b)), T.Tensor(a))), a)
    fa = fd_of(lambda t: T.tsum(T.mul(op(t, T.Tensor(b)), T.Tensor(a))), a)
    assert relative_error(ga, fa) < 1e-4
    gb = grad_of(lambda t: T.tsum(op(T.Tensor(a), t)), b)
    fb = fd_of(lambda t: T.tsum(op(T.Tensor(a), t)), b)
    assert relative_error(gb, fb) < 1e-4


@pytest.mark.parametrize("op", [T.exp, T.sigmoid, T.relu, T.sqrt, T.log])
def test_unary_op_grads_match_fd(op):
    rng = np.random.default_rng(3)
    x = rng.uniform(0.5, 2.0, size=(2, 5))  # positive, away from relu kink
    g = grad_of(lambda t: T.tsum(T.mul(op(t), T.Tensor(x))), x)
    fd = fd_of(lambda t: T.tsum(T.mul(op(t), T.Tensor(x))), x)
    assert relative_error(g, fd) < 1e-4


def test_reshape_transpose_grads():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 3, 4))
    w = rng.normal(size=(24,))

    def loss(t):
        flat = T.reshape(T.transpose(t, (2, 0, 1)), (24,))
        return T.tsum(T.mul(flat, T.Tensor(w)))

    assert relative_error(grad_of(loss, x), fd_of(loss, x)) < 1e-4


def test_mean_grad():
    x = np.arange(6.0).reshape(2, 3)
    g = grad_of(lambda t: T.tmean(t), x)
    np.testing.assert_allclose(g, np.full((2, 3), 1 / 6))


# -------------------------------------------------------------- softmax


def test_softmax_uniform_on_constant():
    out = T.softmax(T.Tensor([2.5, 2.5, 2.5])).data
    np.testing.assert_allclose(out, [1 / 3] * 3, atol=1e-15)


def test_softmax_two_entry_value():
    out = T.softmax(T.Tensor([1.0, 0.0])).data
    np.testing.assert_allclose(out, [0.7311, 0.2689], atol=1e-4)


def test_softmax_stable_at_extreme_values():
    out = T.softmax(T.Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-300)


def test_softmax_empty_axis_errors():
    with pytest.raises(ShapeError):
        T.softmax(T.Tensor(np.empty((2, 0))))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8))
def test_softmax_sums_to_one_and_permutation_equivariant(values):
    x = np.asarray(values)
    out = T.softmax(T.Tensor(x)).data
    assert abs(out.sum() - 1.0) < 1e-12
    perm = np.argsort(x, kind="stable")[::-1]
    np.testing.assert_allclose(
        T.softmax(T.Tensor(x[perm])).data, out[perm], rtol=0, atol=1e-15
    )


def test_softmax_grad_matches_fd():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(3, 4))
    w = rng.normal(size=(3, 4))

    def loss(t):
        return T.tsum(T.mul(T.softmax(t, axis=-1), T.Tensor(w)))

    assert relative_error(grad_of(loss, x), fd_of(loss, x)) < 1e-4


# -------------------------------------------------------- cross entropy


def test_cross_entropy_uniform_logits():
    logits = T.Tensor(np.zeros((2, 4)))
    loss = T.cross_entropy(logits, np.array([1, 3]), np.array([1.0, 1.0]))
    np.testing.assert_allclose(loss.item(), np.log(4.0), rtol=1e-12)


def test_cross_entropy_goes_to_zero_with_margin():
    targets = np.array([2])
    mask = np.ones(1)
    prev = None
    for margin in (2.0, 5.0, 10.0, 20.0):
        logits = np.zeros((1, 5))
        logits[0, 2] = margin
        loss = T.cross_entropy(T.Tensor(logits), targets, mask).item()
        if prev is not None:
            assert loss < prev
        prev = loss
    assert prev < 1e-8


def test_cross_entropy_matches_scalar_recomputation():
    rng = np.random.default_rng(6)
    logits = rng.normal(size=(3, 5))
    targets = rng.integers(0, 5, size=3)
    mask = np.array([1.0, 0.0, 1.0])
    loss = T.cross_entropy(T.Tensor(logits), targets, mask).item()
    # independent per-position log-sum-exp
    total = 0.0
    for t in range(3):
        if mask[t] == 0:
            continue
        z = logits[t]
        total += -(z[targets[t]] - np.log(np.exp(z - z.max()).sum()) - z.max())
    np.testing.assert_allclose(loss, total / mask.sum(), rtol=1e-12)


def test_cross_entropy_all_masked_errors():
    with pytest.raises(DomainError):
        T.cross_entropy(T.Tensor(np.zeros((2, 4))), np.array([0, 1]), np.zeros(2))


def test_cross_entropy_target_out_of_range():
    with pytest.raises(DomainError):
        T.cross_entropy(T.Tensor(np.zeros((1, 4))), np.array([4]), np.ones(1))


def test_cross_entropy_grad_matches_fd():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(2, 3, 5))
    targets = rng.integers(0, 5, size=(2, 3))
    mask = np.array([[1.0, 1.0, 0.0], [1.0, 0.0, 0.0]])

    def loss(t):
        return T.cross_entropy(t, targets, mask)

    assert relative_error(grad_of(loss, x), fd_of(loss, x)) < 1e-4


# ------------------------------------------------------------ embedding


def test_embedding_gather_and_scatter_grad():
    table = np.arange(12.0).reshape(4, 3)
    ids = np.array([[0, 2, 2]])
    out = T.embedding(T.Tensor(table), ids)
    np.testing.assert_array_equal(out.data[0, 1], table[2])

    g = grad_of(lambda t: T.tsum(T.embedding(t, ids)), table)
    expected = np.zeros((4, 3))
    expected[0] = 1.0
    expected[2] = 2.0  # row 2 gathered twice
    np.testing.assert_array_equal(g, expected)


def test_embedding_id_out_of_range():
    with pytest.raises(DomainError):
        T.embedding(T.Tensor(np.zeros((4, 3))), np.array([4]))


# ------------------------------------------------------- tape contracts


def test_backward_sum_gives_ones():
    x = T.Tensor(np.arange(3.0), requires_grad=True)
    tape = T.Tape()
    with tape:
        loss = T.tsum(x)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, np.ones(3))


def test_backward_sum_of_squares():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    tape = T.Tape()
    with tape:
        loss = T.tsum(T.mul(x, x))
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, [2.0, 4.0])
    fd = fd_of(lambda t: T.tsum(T.mul(t, t)), np.array([1.0, 2.0]))
    assert relative_error(x.grad, fd) < 1e-4


def test_backward_twice_errors():
    x = T.Tensor([1.0], requires_grad=True)
    tape = T.Tape()
    with tape:
        loss = T.tsum(x)
    tape.backward(loss)
    with pytest.raises(TapeError):
        tape.backward(loss)


def test_backward_non_scalar_errors():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    tape = T.Tape()
    with tape:
        y = T.mul(x, x)
    with pytest.raises(TapeError):
        tape.backward(y)


def test_backward_off_tape_loss_errors():
    x = T.Tensor([1.0], requires_grad=True)
    tape = T.Tape()
    with tape:
        T.tsum(x)
    stray = T.Tensor(1.0)
    with pytest.raises(TapeError):
        tape.backward(stray)


def test_existing_grad_requires_explicit_accumulate():
    x = T.Tensor([1.0, 2.0], requires_grad=True)

    def run(accumulate):
        tape = T.Tape()
        with tape:
            loss = T.tsum(x)
        tape.backward(loss, accumulate=accumulate)

    run(False)
    with pytest.raises(TapeError):
        run(False)
    run(True)
    np.testing.assert_array_equal(x.grad, 2 * np.ones(2))


def test_shared_subexpression_accumulates_on_tape():
    x = T.Tensor([3.0], requires_grad=True)
    tape = T.Tape()
    with tape:
        y = T.mul(x, x)  # x used twice
        loss = T.tsum(T.add(y, x))
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, [7.0])  # 2x + 1


def test_no_recording_without_active_tape():
    x = T.Tensor([1.0], requires_grad=True)
    tape = T.Tape()
    with tape:
        pass
    y = T.mul(x, x)
    assert len(tape) == 0
    assert y.requires_grad  # flag still propagates


def test_forward_backward_deterministic():
    def run():
        rng = np.random.default_rng(99)
        x = T.Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        w = T.Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        tape = T.Tape()
        with tape:
            out = T.softmax(T.matmul(x, w), axis=-1)
            loss = T.tmean(T.mul(out, out))
        tape.backward(loss)
        return loss.item(), x.grad.copy(), w.grad.copy()

    l1, gx1, gw1 = run()
    l2, gx2, gw2 = run()
    assert l1 == l2
    np.testing.assert_array_equal(gx1, gx2)
    np.testing.assert_array_equal(gw1, gw2)
