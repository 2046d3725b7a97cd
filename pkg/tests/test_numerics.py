"""Autodiff op correctness: closed-form examples plus finite-difference
gradient checks for every differentiable operation."""

from __future__ import annotations

import math

import numpy as np
import pytest

from mrpdiff.errors import InvalidShapeError, NoGradError
from mrpdiff.numerics import tensor as T
from mrpdiff.numerics.optim import OptimizerState, adamw_step, cosine_lr
from mrpdiff.numerics.tensor import Tensor, backward, no_grad, zero_grads

from util import check_grads


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------


def test_softmax_symmetric_pair():
    out = T.softmax_rows(T.tensor([0.0, 0.0]))
    np.testing.assert_allclose(out.data, [0.5, 0.5], rtol=0, atol=1e-15)


def test_softmax_closed_form():
    out = T.softmax_rows(T.tensor([0.0, math.log(2.0)]))
    np.testing.assert_allclose(out.data, [1.0 / 3.0, 2.0 / 3.0], rtol=1e-14)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(11)
    for _ in range(50):
        x = rng.normal(size=(3, 9))
        c = float(rng.normal()) * 10
        a = T.softmax_rows(T.tensor(x)).data
        b = T.softmax_rows(T.tensor(x + c)).data
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_softmax_rows_sum_to_one_and_positive():
    rng = np.random.default_rng(3)
    x = rng.normal(scale=30.0, size=(200, 17))
    p = T.softmax_rows(T.tensor(x)).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, rtol=0, atol=1e-12)
    assert (p > 0).all()


def test_softmax_empty_last_extent_raises():
    with pytest.raises(InvalidShapeError):
        T.softmax_rows(T.tensor(np.empty((3, 0))))


# ---------------------------------------------------------------------------
# kl_rows
# ---------------------------------------------------------------------------


def test_kl_identical_is_zero():
    p = T.tensor([0.3, 0.7])
    assert abs(T.kl_rows(p, p).item()) < 1e-15


def test_kl_closed_form():
    p = T.tensor([1.0, 0.0])
    q = T.tensor([0.5, 0.5])
    assert abs(T.kl_rows(p, q).item() - math.log(2.0)) < 1e-12


def test_kl_nonnegative_on_random_pairs():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        p = T.softmax_rows(T.tensor(rng.normal(size=8))).data
        q = T.softmax_rows(T.tensor(rng.normal(size=8))).data
        assert T.kl_rows(T.tensor(p), T.tensor(q)).item() >= -1e-15


def test_kl_zero_q_is_clamped_not_raised():
    p = T.tensor([0.5, 0.5])
    q = T.tensor([1.0, 0.0])
    val = T.kl_rows(p, q).item()
    assert np.isfinite(val) and val > 0


def test_kl_mean_over_rows():
    p = T.tensor([[1.0, 0.0], [0.5, 0.5]])
    q = T.tensor([[0.5, 0.5], [0.5, 0.5]])
    assert abs(T.kl_rows(p, q).item() - math.log(2.0) / 2) < 1e-12


# ---------------------------------------------------------------------------
# backward semantics
# ---------------------------------------------------------------------------


def test_backward_square():
    x = T.param(np.asarray(3.0).reshape(1))
    loss = T.sum_all(T.mul(x, x))
    backward(loss)
    assert abs(x.grad[0] - 6.0) < 1e-12


def test_backward_accumulates_on_repeat():
    x = T.param(np.asarray(3.0).reshape(1))
    loss = T.sum_all(T.mul(x, x))
    backward(loss)
    backward(loss)
    assert abs(x.grad[0] - 12.0) < 1e-12


def test_backward_disconnected_param_gets_no_grad():
    x = T.param(np.ones(2))
    y = T.param(np.ones(2))
    loss = T.sum_all(T.mul(x, x))
    backward(loss)
    assert y.grad is None
    assert x.grad is not None


def test_backward_requires_scalar():
    x = T.param(np.ones(3))
    with pytest.raises(InvalidShapeError):
        backward(T.mul(x, x))


def test_no_grad_suppresses_tape():
    x = T.param(np.ones(2))
    with no_grad():
        y = T.mul(x, x)
    assert y._parents == ()


def test_diamond_graph_grad():
    # z = (x + x) * x  ->  dz/dx = 4x
    x = T.param(np.asarray([2.0]))
    z = T.sum_all(T.mul(T.add(x, x), x))
    backward(z)
    assert abs(x.grad[0] - 8.0) < 1e-12


# ---------------------------------------------------------------------------
# finite-difference checks, one per differentiable op
# ---------------------------------------------------------------------------


def _rand(rng, *shape):
    return T.param(rng.normal(size=shape))


def test_fd_elementwise_ops():
    rng = np.random.default_rng(0)
    a, b = _rand(rng, 4, 5), _rand(rng, 4, 5)
    check_grads(lambda: T.sum_all(T.mul(T.add(a, b), T.sub(a, b))), [a, b])
    c = _rand(rng, 5)  # broadcast add
    check_grads(lambda: T.sum_all(T.mul(T.add(a, c), T.add(a, c))), [a, c])
    check_grads(lambda: T.sum_all(T.silu(a)), [a])
    check_grads(lambda: T.sum_all(T.scale(a, 2.5)), [a])


def test_fd_matmul():
    rng = np.random.default_rng(1)
    a, w = _rand(rng, 6, 4), _rand(rng, 4, 3)
    check_grads(lambda: T.sum_all(T.mul(T.matmul(a, w), T.matmul(a, w))), [a, w])
    # batched both sides
    q, k = _rand(rng, 2, 5, 3), _rand(rng, 2, 3, 5)
    check_grads(lambda: T.sum_all(T.mul(T.matmul(q, k), T.matmul(q, k))), [q, k])


def test_fd_softmax_and_logsoftmax():
    rng = np.random.default_rng(2)
    x = _rand(rng, 3, 7)
    w = rng.normal(size=(3, 7))
    check_grads(lambda: T.sum_all(T.mul(T.softmax_rows(x), w)), [x])
    check_grads(lambda: T.sum_all(T.mul(T.log_softmax_rows(x), w)), [x])


def test_fd_rmsnorm():
    rng = np.random.default_rng(3)
    x, g = _rand(rng, 4, 6), T.param(1.0 + 0.1 * rng.normal(size=6))
    w = rng.normal(size=(4, 6))
    check_grads(lambda: T.sum_all(T.mul(T.rmsnorm(x, g, 1e-6), w)), [x, g])


def test_fd_shape_ops():
    rng = np.random.default_rng(4)
    x = _rand(rng, 4, 6)
    w = rng.normal(size=(2, 2, 6))
    check_grads(
        lambda: T.sum_all(T.mul(T.transpose(T.reshape(x, (2, 2, 6)), (1, 0, 2)), w)),
        [x],
    )
    y = _rand(rng, 4, 3)
    check_grads(lambda: T.sum_all(T.mul(T.concat_last(x, y), T.concat_last(x, y))), [x, y])
    check_grads(lambda: T.sum_all(T.mul(T.slice_last(x, 1, 4), T.slice_last(x, 1, 4))), [x])
    check_grads(lambda: T.sum_all(T.mul(T.slice_rows(x, 2), T.slice_rows(x, 2))), [x])


def test_fd_gather_ops():
    rng = np.random.default_rng(5)
    table = _rand(rng, 9, 4)
    ids = np.array([1, 3, 3, 0])
    check_grads(lambda: T.sum_all(T.mul(T.embed(table, ids), T.embed(table, ids))), [table])
    x = _rand(rng, 6, 5)
    idx = np.array([0, 2, 2, 5])
    check_grads(lambda: T.sum_all(T.mul(T.select_rows(x, idx), T.select_rows(x, idx))), [x])
    cols = np.array([4, 0, 1, 1, 2, 3])
    check_grads(lambda: T.sum_all(T.mul(T.take_per_row(x, cols), T.take_per_row(x, cols))), [x])


def test_fd_kl_rows_student_side():
    rng = np.random.default_rng(6)
    p = T.tensor(T.softmax_rows(T.tensor(rng.normal(size=(4, 6)))).data)
    z = _rand(rng, 4, 6)
    check_grads(lambda: T.kl_rows(p, T.softmax_rows(z)), [z])


# ---------------------------------------------------------------------------
# linearity
# ---------------------------------------------------------------------------


def test_linear_map_additivity():
    rng = np.random.default_rng(7)
    w = T.tensor(rng.normal(size=(8, 5)))
    a = rng.normal(size=(3, 8))
    b = rng.normal(size=(3, 8))
    lhs = T.matmul(T.tensor(a + b), w).data
    rhs = T.matmul(T.tensor(a), w).data + T.matmul(T.tensor(b), w).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def _opt(**kw):
    defaults = dict(peak_lr=1e-3, min_lr=1e-5, total_steps=100)
    defaults.update(kw)
    return OptimizerState(**defaults)


def test_cosine_endpoints_and_midpoint():
    opt = _opt()
    assert cosine_lr(0, opt) == opt.peak_lr
    assert cosine_lr(100, opt) == opt.min_lr
    assert abs(cosine_lr(50, opt) - (opt.peak_lr + opt.min_lr) / 2) < 1e-18
    assert cosine_lr(1000, opt) == opt.min_lr  # clamps past the end


def test_adamw_first_step_closed_form():
    p = T.param(np.asarray([1.0]))
    p.grad = np.asarray([0.5])
    opt = _opt(peak_lr=1e-3, min_lr=1e-3, weight_decay=0.0)
    adamw_step([("p", p)], opt)
    # bias-corrected first step: lr * g / (sqrt(g^2) + eps) ~= lr
    assert abs((1.0 - p.data[0]) - 1e-3) < 1e-8
    assert opt.step_count == 1


def test_adamw_zero_grad_zero_wd_no_change():
    p = T.param(np.asarray([2.0]))
    q = T.param(np.asarray([1.0]))
    q.grad = np.asarray([0.1])
    opt = _opt(peak_lr=1e-3, min_lr=1e-3)
    adamw_step([("p", p), ("q", q)], opt)
    assert p.data[0] == 2.0


def test_adamw_decoupled_decay_exact():
    p = T.param(np.asarray([2.0]))
    q = T.param(np.asarray([1.0]))
    q.grad = np.asarray([0.0])
    opt = _opt(peak_lr=1e-3, min_lr=1e-3, weight_decay=0.1)
    adamw_step([("p", p), ("q", q)], opt)
    assert abs(p.data[0] - (2.0 - 1e-3 * 0.1 * 2.0)) < 1e-15


def test_adamw_before_backward_raises():
    p = T.param(np.asarray([1.0]))
    with pytest.raises(NoGradError):
        adamw_step([("p", p)], _opt())


def test_zero_grads():
    p = T.param(np.ones(3))
    p.grad = np.ones(3)
    zero_grads([p])
    assert p.grad is None


# ---------------------------------------------------------------------------
# determinism
# ---------------------------------------------------------------------------


def test_op_determinism():
    rng1 = np.random.default_rng(42)
    rng2 = np.random.default_rng(42)

    def run(rng):
        x = T.param(rng.normal(size=(6, 8)))
        w = T.param(rng.normal(size=(8, 8)))
        out = T.softmax_rows(T.matmul(T.rmsnorm(x, T.tensor(np.ones(8))), w))
        loss = T.sum_all(T.mul(out, out))
        backward(loss)
        return out.data.copy(), x.grad.copy()

    o1, g1 = run(rng1)
    o2, g2 = run(rng2)
    assert np.array_equal(o1, o2) and np.array_equal(g1, g2)
