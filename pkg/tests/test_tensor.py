import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pfanet import tensor as T
from pfanet.gradcheck import check_gradients
from pfanet.tensor import GradientError, ShapeError, Tensor


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def test_default_dtype_is_float32_and_switchable():
    assert Tensor([1.0]).dtype == np.float32
    with T.precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_sum_backward_is_ones():
    x = t64([1.0, 2.0, 3.0])
    T.backward(T.sum(x))
    np.testing.assert_array_equal(x.grad, [1, 1, 1])


def test_square_backward():
    x = t64([1.0, 2.0])
    T.backward(T.sum(x * x))
    np.testing.assert_array_equal(x.grad, [2, 4])


def test_reduce_examples():
    assert T.mean(t64([[1, 3], [5, 7]])).item() == 4
    assert T.sum(t64(np.ones((3, 4, 5))), (1, 2)).shape == (3,)
    x = t64([2.0, 2.0, 1.0])
    m = T.max(x)
    assert m.item() == 2
    T.backward(m)
    np.testing.assert_array_equal(x.grad, [1, 0, 0])


def test_max_tie_goes_to_first_index_along_axis():
    x = t64([[3.0, 1.0, 3.0], [0.0, 5.0, 5.0]])
    T.backward(T.sum(T.max(x, 1)))
    np.testing.assert_array_equal(x.grad, [[1, 0, 0], [0, 1, 0]])


def test_empty_reduction_rejected():
    with pytest.raises(ValueError):
        T.sum(t64([1.0, 2.0]), ())


def test_concat_slice_round_trip():
    a, b = t64(np.zeros((2, 4, 4))), t64(np.ones((3, 4, 4)))
    c = T.concat([a, b], 0)
    assert c.shape == (5, 4, 4)
    np.testing.assert_array_equal(T.slice(c, 0, 2, 5).data, b.data)
    T.backward(T.sum(c))
    np.testing.assert_array_equal(a.grad, np.ones((2, 4, 4)))
    np.testing.assert_array_equal(b.grad, np.ones((3, 4, 4)))


def test_concat_mismatch_rejected():
    with pytest.raises(ShapeError):
        T.concat([t64(np.zeros((2, 3))), t64(np.zeros((2, 4)))], 0)


def test_broadcast_mismatch_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4,\)"):
        t64(np.zeros((2, 3))) + t64(np.zeros(4))


def _loop_broadcast(a, b, op):
    out_shape = np.broadcast_shapes(a.shape, b.shape)
    out = np.empty(out_shape)
    for idx in itertools.product(*(range(n) for n in out_shape)):
        ia = tuple(0 if da == 1 else i for i, da in zip(idx[len(idx) - a.ndim:], a.shape))
        ib = tuple(0 if db == 1 else i for i, db in zip(idx[len(idx) - b.ndim:], b.shape))
        out[idx] = op(a[ia], b[ib])
    return out


def _shapes():
    dims = st.integers(1, 4)
    return st.lists(dims, min_size=1, max_size=3)


@settings(max_examples=60, deadline=None)
@given(_shapes(), st.data())
def test_broadcast_add_mul_match_loop_oracle(shape, data):
    other = [data.draw(st.sampled_from([1, n])) for n in shape]
    other = other[data.draw(st.integers(0, len(other) - 1)):]
    rng = np.random.default_rng(len(shape) * 7 + sum(other))
    a, b = rng.standard_normal(shape), rng.standard_normal(other)
    for fn, op in ((T.add, lambda x, y: x + y), (T.mul, lambda x, y: x * y)):
        got = fn(t64(a, False), t64(b, False)).data
        np.testing.assert_array_equal(got, _loop_broadcast(a, b, op))


UNARY = {
    "relu": (T.relu, lambda r, s: np.where(np.abs(v := r.standard_normal(s)) < 0.05, 0.1, v)),
    "sigmoid": (T.sigmoid, lambda r, s: r.standard_normal(s)),
    "exp": (T.exp, lambda r, s: r.standard_normal(s)),
    "log": (T.log, lambda r, s: r.uniform(0.3, 3.0, s)),
    "sqrt": (T.sqrt, lambda r, s: r.uniform(0.3, 3.0, s)),
}


@settings(max_examples=100, deadline=None)
@given(st.sampled_from(sorted(UNARY)), _shapes(), st.integers(0, 2**31))
def test_unary_ops_match_finite_differences(name, shape, seed):
    fn, make = UNARY[name]
    rng = np.random.default_rng(seed)
    with T.precision(np.float64):
        x = t64(make(rng, shape))
        assert check_gradients(fn, [x], rng=rng) < 1e-6


@settings(max_examples=100, deadline=None)
@given(st.sampled_from(["add", "sub", "mul", "sum", "mean", "max", "reshape", "slice"]),
       st.integers(0, 2**31))
def test_structural_ops_match_finite_differences(name, seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(1, 5, 3))
    a, b = t64(rng.standard_normal(shape)), t64(rng.standard_normal(shape[1:]))
    cases = {
        "add": (T.add, [a, b]), "sub": (T.sub, [a, b]), "mul": (T.mul, [a, b]),
        "sum": (lambda x: T.sum(x, (0, 2)), [a]), "mean": (lambda x: T.mean(x, 1), [a]),
        "max": (lambda x: T.max(x, (1, 2)), [a]),
        "reshape": (lambda x: T.reshape(x, (-1,)), [a]),
        "slice": (lambda x: T.slice(x, 0, 0, 1), [a]),
    }
    fn, inputs = cases[name]
    with T.precision(np.float64):
        assert check_gradients(fn, inputs, rng=rng) < 1e-6


def test_random_five_op_graph(f64, rng):
    x, y = t64(rng.uniform(0.5, 2, (3, 4))), t64(rng.standard_normal(4))

    def graph(x, y):
        return T.sum(T.sigmoid(T.log(x) * y) + T.exp(y) - T.sqrt(x))
    assert check_gradients(graph, [x, y], rng=rng) < 1e-6


def test_two_consumers_sum_contributions(f64, rng):
    x = t64(rng.standard_normal((3, 3)))

    def graph(x):
        h = T.sigmoid(x)
        return T.sum(h * h + T.exp(h))
    assert check_gradients(graph, [x], rng=rng) < 1e-6
    x.grad = None
    h = T.sigmoid(x)
    T.backward(T.sum(h + h))
    s = 1 / (1 + np.exp(-x.data))
    np.testing.assert_allclose(x.grad, 2 * s * (1 - s), rtol=1e-12)


def test_ops_do_not_mutate_inputs(f64, rng):
    a, b = t64(rng.uniform(0.5, 2, (2, 3))), t64(rng.uniform(0.5, 2, 3))
    before = a.data.copy(), b.data.copy()
    outs = [T.add(a, b), T.mul(a, b), T.sub(a, b), T.relu(a), T.sigmoid(a), T.exp(a), T.log(a),
            T.sqrt(a), T.clip(a, 0.6, 1.5), T.max(a, 1), T.mean(a), T.concat([a, a], 0),
            T.slice(a, 1, 0, 2), T.reshape(a, (6,))]
    T.backward(T.sum(T.concat([T.reshape(o, (-1,)) for o in outs], 0)))
    np.testing.assert_array_equal(a.data, before[0])
    np.testing.assert_array_equal(b.data, before[1])


def test_backward_twice_is_an_error(f64):
    x = t64([1.0, 2.0])
    loss = T.sum(x * x)
    T.backward(loss)
    with pytest.raises(GradientError):
        T.backward(loss)


def test_stale_leaf_gradient_is_an_error(f64):
    x = t64([1.0, 2.0])
    T.backward(T.sum(x))
    with pytest.raises(GradientError, match="zero_grad"):
        T.backward(T.sum(x * x))
    x.zero_grad()
    T.backward(T.sum(x * x))
    np.testing.assert_array_equal(x.grad, [2, 4])


def test_non_scalar_root_is_an_error(f64):
    with pytest.raises(GradientError):
        T.backward(t64([1.0, 2.0]) * 2.0)


def test_no_grad_records_nothing(f64):
    x = t64([1.0])
    with T.no_grad():
        y = x * x
    assert y.node is None and not y.requires_grad


def test_sqrt_gradient_at_zero_is_zero(f64):
    x = t64([0.0, 4.0])
    T.backward(T.sum(T.sqrt(x)))
    np.testing.assert_array_equal(x.grad, [0.0, 0.25])


def test_tape_is_in_creation_order(f64):
    x = t64([1.0])
    a = T.exp(x)
    b = T.log(a)
    tape = T.backward(T.sum(b))
    ids = [e.output_id for e in tape.entries]
    assert ids == sorted(ids)
    assert [e.op for e in tape.entries][:3] == [None, "exp", "log"]
