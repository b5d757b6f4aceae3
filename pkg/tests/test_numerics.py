import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from progdistill import numerics as nx
from progdistill.numerics import ContractError, Distribution, ShapeError, Tensor

from oracles import matmul_loops, numeric_grad

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def grad_of(loss_fn, *leaves):
    for t in leaves:
        t.zero_grad()
    nx.backward(loss_fn())
    return [t.grad.copy() for t in leaves]


def check_against_fd(loss_fn, *leaves, tol=1e-7):
    analytic = grad_of(loss_fn, *leaves)
    for t, a in zip(leaves, analytic):
        n = numeric_grad(lambda: loss_fn().item(), t.data)
        np.testing.assert_allclose(a, n, rtol=tol, atol=tol)


@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4, 2), elements=finite))
def test_matmul_matches_triple_loop(a, b):
    out = nx.matmul(Tensor(a), Tensor(b))
    np.testing.assert_allclose(out.data, matmul_loops(a, b), rtol=1e-12, atol=1e-12)


def test_matmul_rejects_bad_shapes():
    with pytest.raises(ShapeError):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        nx.matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 1))))


@pytest.mark.parametrize("op", ["add", "mul", "sub", "matmul", "tanh", "exp", "log", "transpose", "reshape"])
def test_elementary_gradients(op, rng):
    a = leaf(rng, 3, 4)
    b = leaf(rng, 3, 4)
    c = leaf(rng, 4, 2)
    w = Tensor(rng.normal(size=(3, 4)))
    if op == "log":
        a.data[:] = np.abs(a.data) + 0.5
    fns = {
        "add": lambda: ((a + b) * w).sum(),
        "mul": lambda: ((a * b) * w).sum(),
        "sub": lambda: ((a - b) * w).sum(),
        "matmul": lambda: (a @ c).tanh().sum(),
        "tanh": lambda: (a.tanh() * w).sum(),
        "exp": lambda: (a.exp() * w).sum(),
        "log": lambda: (a.log() * w).sum(),
        "transpose": lambda: (a.T @ Tensor(rng.normal(size=(3, 2)))).sum(),
        "reshape": lambda: (nx.reshape(a, (4, 3)) * Tensor(np.arange(12.0).reshape(4, 3))).sum(),
    }
    fn = fns[op]
    if op == "transpose":
        m = Tensor(rng.normal(size=(3, 2)))
        fn = lambda: (a.T @ m).sum()  # noqa: E731
    check_against_fd(fn, a, b, c)


def test_broadcast_gradients_reduce_to_operand_shape(rng):
    a = leaf(rng, 4, 3)
    bias = leaf(rng, 3)
    w = Tensor(rng.normal(size=(4, 3)))
    check_against_fd(lambda: ((a + bias).tanh() * w).sum(), a, bias)
    assert bias.grad.shape == (3,)


def test_indexing_and_segment_ops(rng):
    a = leaf(rng, 6, 3)
    rows = np.array([0, 2, 2, 5])
    offsets = np.array([0, 2, 3])
    lengths = np.array([2, 1, 3])
    w = Tensor(rng.normal(size=(4, 3)))
    v = Tensor(rng.normal(size=(3, 3)))
    check_against_fd(lambda: (nx.take_rows(a, rows) * w).sum(), a)
    check_against_fd(lambda: (nx.segment_mean(a, offsets, lengths) * v).sum(), a)
    check_against_fd(lambda: (nx.gather(a, [0, 1, 1], [2, 0, 0]) * Tensor([1.0, 2.0, 3.0])).sum(), a)
    check_against_fd(lambda: (a[1:4] * Tensor(np.ones((3, 3)))).sum(), a)


def test_segment_mean_values():
    a = Tensor(np.arange(12.0).reshape(6, 2))
    out = nx.segment_mean(a, np.array([0, 1, 4]), np.array([1, 3, 2]))
    np.testing.assert_allclose(out.data, [[0, 1], [4, 5], [9, 10]])


def test_concat_rowwise_dot_and_log_softmax(rng):
    a, b = leaf(rng, 2, 3), leaf(rng, 4, 3)
    w = Tensor(rng.normal(size=(6, 3)))
    check_against_fd(lambda: (nx.concat([a, b]) * w).sum(), a, b)
    c = leaf(rng, 2, 3)
    check_against_fd(lambda: nx.rowwise_dot(a, c).sum(), a, c)
    s = leaf(rng, 5)
    check_against_fd(lambda: nx.log_softmax(s)[2], s)


@given(arrays(np.float64, st.integers(1, 8), elements=finite), st.floats(0.1, 10))
def test_softmax_is_a_distribution(x, tau):
    d = nx.softmax_temp(Tensor(x), tau)
    assert abs(d.probs.sum() - 1) <= 1e-12
    assert np.all(d.probs >= 0)


@given(arrays(np.float64, st.integers(1, 8), elements=finite))
def test_softmax_shift_invariant(x):
    p = nx.softmax_temp(Tensor(x), 2.0).probs
    q = nx.softmax_temp(Tensor(x + 3.7), 2.0).probs
    np.testing.assert_allclose(p, q, atol=1e-12)


def test_softmax_rejects_nonpositive_temperature():
    for tau in (0.0, -1.0):
        with pytest.raises(ValueError):
            nx.softmax_temp(Tensor([1.0, 2.0]), tau)


def test_softmax_temperature_gradient(rng):
    s = leaf(rng, 5)
    target = Tensor(rng.dirichlet(np.ones(5)))
    check_against_fd(lambda: (nx.softmax_temp(s, 3.0).tensor * target).sum(), s)


@given(arrays(np.float64, st.integers(2, 8), elements=finite), arrays(np.float64, 8, elements=finite))
def test_kl_nonnegative_and_zero_on_self(x, y):
    p = nx.softmax_temp(Tensor(x), 1.0)
    q = nx.softmax_temp(Tensor(y[:x.size]), 1.0)
    assert nx.kl_divergence(p, q).item() >= -1e-12
    assert abs(nx.kl_divergence(p, p).item()) <= 1e-10


def test_kl_matches_definition(rng):
    p = Distribution.from_probs(rng.dirichlet(np.ones(6)))
    q = Distribution.from_probs(rng.dirichlet(np.ones(6)))
    expected = float(np.sum(p.probs * (np.log(p.probs) - np.log(q.probs))))
    assert nx.kl_divergence(p, q).item() == pytest.approx(expected, abs=1e-12)


def test_kl_support_mismatch():
    with pytest.raises(ShapeError):
        nx.kl_divergence(Distribution.from_probs([0.5, 0.5]), Distribution.from_probs([1 / 3] * 3))


def test_kl_gradient_ignores_target_side(rng):
    t = leaf(rng, 4)
    s = leaf(rng, 4)
    loss = nx.kl_divergence(nx.softmax_temp(t, 2.0), nx.softmax_temp(s, 2.0))
    nx.backward(loss)
    assert np.all(t.grad == 0)
    assert np.any(s.grad != 0)


def test_kl_with_zero_probability_target_is_finite():
    p = Distribution.from_probs([1.0, 0.0, 0.0])
    q = Distribution.from_probs([0.5, 0.5, 0.0])
    assert math.isfinite(nx.kl_divergence(p, q).item())


def test_distribution_validation():
    with pytest.raises(ValueError):
        Distribution.from_probs([0.6, 0.6])
    with pytest.raises(ValueError):
        Distribution.from_probs([1.2, -0.2])
    with pytest.raises(ShapeError):
        Distribution.from_probs([])


def test_backward_requires_scalar(rng):
    with pytest.raises(ContractError):
        nx.backward(leaf(rng, 3) * 2.0)


def test_backward_accumulates_and_zero_grad_resets(rng):
    a = leaf(rng, 3)
    nx.backward((a * 2.0).sum())
    nx.backward((a * 2.0).sum())
    np.testing.assert_allclose(a.grad, 4.0)
    nx.zero_grad([a])
    assert np.all(a.grad == 0)


def test_shared_subexpression_gradient(rng):
    a = leaf(rng, 3)
    h = a.tanh()
    check_against_fd(lambda: ((a.tanh() * a.tanh()) + a.tanh()).sum(), a)
    nx.zero_grad([a])
    nx.backward((h * h + h).sum())
    expected = (2 * np.tanh(a.data) + 1) * (1 - np.tanh(a.data) ** 2)
    np.testing.assert_allclose(a.grad, expected, rtol=1e-12)


def test_deep_chain_does_not_recurse(rng):
    a = leaf(rng, 1)
    x = a
    for _ in range(5000):
        x = x * 1.0
    nx.backward(x.sum())
    assert a.grad[0] == 1.0


def test_tape_is_topological(rng):
    a = leaf(rng, 2)
    b = (a * 3.0).tanh()
    loss = (b + a).sum()
    tape = nx.Tape.record(loss)
    pos = {id(n): i for i, n in enumerate(tape)}
    for n in tape:
        for p in n._parents:
            assert pos[id(p)] < pos[id(n)]


def test_no_grad_records_nothing(rng):
    a = leaf(rng, 3)
    with nx.no_grad():
        out = (a * 2.0).sum()
    assert not out.requires_grad
    assert out._parents == ()


def test_log_clamp(rng):
    x = Tensor(np.array([0.0, 1.0]), requires_grad=True)
    y = nx.log(x)
    assert y.data[0] == pytest.approx(math.log(1e-12))
    nx.backward(y.sum())
    assert np.all(np.isfinite(x.grad))


def test_gradient_check_flags_wrong_gradient(rng):
    p = leaf(rng, 3)
    good = nx.gradient_check(lambda: (p.tanh() * p).sum(), p)
    assert good < 1e-7
    with pytest.raises(ValueError):
        nx.gradient_check(lambda: p.sum(), p, eps=1.0)


def test_gradient_check_detects_broken_backward(rng):
    p = leaf(rng, 4)

    def broken(a):
        return nx._make(a.data ** 2, (a,), lambda g: (g * a.data,))  # true derivative is 2a

    err = nx.gradient_check(lambda: broken(p).sum(), p)
    assert err > 1e-2
