import math

import mpmath
import numpy as np
import pytest

from adamcu import tensor as T


def test_softmax_symmetric():
    np.testing.assert_array_equal(T.softmax(T.Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_softmax_log_ratio():
    # exp-normalisation of (ln 1, ln 3) evaluated at 50 digits
    with mpmath.workdps(50):
        e = [mpmath.e ** mpmath.log(1), mpmath.e ** mpmath.log(3)]
        expected = [float(v / (e[0] + e[1])) for v in e]
    got = T.softmax(T.Tensor([math.log(1.0), math.log(3.0)])).data
    np.testing.assert_allclose(got, expected, atol=1e-15)
    np.testing.assert_allclose(expected, [0.25, 0.75], atol=1e-15)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    x = rng.normal(scale=30, size=(5, 7, 4))
    s = T.softmax(T.Tensor(x)).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)


def test_add_identity():
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(T.add(T.Tensor(x), T.zeros((2, 3))).data, x)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4,\)"):
        T.add(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros(4)))
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 3))))


def test_backward_sum_gives_ones():
    _, (g,) = T.grad(lambda x: T.sum(x), np.zeros((2, 3, 4)))
    np.testing.assert_array_equal(g, np.ones((2, 3, 4)))


def test_backward_square():
    _, (g,) = T.grad(lambda x: T.sum(T.mul(x, x)), np.array([3.0]))
    np.testing.assert_array_equal(g, [6.0])


def test_backward_rejects_non_scalar():
    x = T.parameter(np.ones(3))
    with T.Tape():
        y = T.mul(x, 2.0)
        with pytest.raises(ValueError, match="scalar"):
            T.backward(y)


def test_ops_outside_tape_are_constants():
    x = T.parameter(np.ones(3))
    y = T.mul(x, 2.0)
    assert not y.requires_grad
    assert T.backward(T.sum(y)) == {}


def test_tape_records_in_execution_order():
    x = T.parameter(np.ones(2))
    with T.Tape() as tape:
        a = T.mul(x, 2.0)
        b = T.exp(a)
        c = T.sum(b)
    assert tape.nodes == [a, b, c]


def test_shared_subexpression_accumulates():
    # f = sum(y * y) with y = 3x  ->  df/dx = 18 x
    _, (g,) = T.grad(lambda x: (lambda y: T.sum(T.mul(y, y)))(T.mul(x, 3.0)), np.array([1.0, -2.0]))
    np.testing.assert_allclose(g, [18.0, -36.0])


def test_finite_diff_sum_is_exact():
    x = np.random.default_rng(1).normal(size=(3, 4))
    assert T.finite_diff_check(lambda t: T.sum(t), x) < 1e-10


def test_finite_diff_softmax_cross_entropy():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(6, 5))
    labels = rng.integers(0, 5, size=6)
    err = T.finite_diff_check(lambda t: T.neg(T.mean(T.pick(T.log_softmax(t), labels))), x)
    assert err < 1e-4


def _bad_square(a):
    a = T.as_tensor(a)
    return T.Tensor.from_op(a.data ** 2, (a,), lambda g: (g * 3.0 * a.data,))  # should be 2a


def test_finite_diff_catches_corrupted_rule():
    x = np.random.default_rng(3).uniform(1, 2, size=5)
    assert T.finite_diff_check(lambda t: T.sum(_bad_square(t)), x) > 1e-2


def test_finite_diff_rejects_bad_step_and_nonfinite():
    with pytest.raises(ValueError):
        T.finite_diff_check(lambda t: T.sum(t), np.ones(2), step=0.0)
    with pytest.raises(ValueError, match="finite"):
        T.finite_diff_check(lambda t: T.sum(T.mul(t, np.inf)), np.ones(2))


def _composite(x):
    # conv -> relu -> 1x1 -> softmax -> log -> weighted sum
    rng = np.random.default_rng(7)
    w1 = rng.normal(size=(3, 3, 2, 3))
    w2 = rng.normal(size=(3, 4))
    h = T.relu(T.conv2d(x, w1, np.full(3, 0.1)))
    s = T.softmax(T.matmul(h, w2))
    return T.sum(T.mul(T.log(s), rng.normal(size=s.shape)))


def test_five_layer_composite_matches_finite_differences():
    x = np.random.default_rng(5).normal(size=(2, 4, 4, 2))
    assert T.finite_diff_check(_composite, x, 1e-5) < 1e-4


UNARY = {
    "exp": lambda t: T.exp(t),
    "log": lambda t: T.log(T.add(T.mul(t, t), 0.5)),
    "sqrt": lambda t: T.sqrt(T.add(T.mul(t, t), 0.5)),
    "relu": lambda t: T.relu(t),
    "neg": lambda t: T.neg(t),
    "softmax": lambda t: T.softmax(t),
    "log_softmax": lambda t: T.log_softmax(t),
    "l2_normalize": lambda t: T.l2_normalize(t),
    "reshape": lambda t: T.reshape(t, (-1,)),
    "sum_axis": lambda t: T.sum(t, axis=1),
    "sum_keep": lambda t: T.sum(t, axis=0, keepdims=True),
    "mean": lambda t: T.mean(t, axis=1),
    "take": lambda t: T.take(t, np.array([[0, 1], [1, 1], [2, 0]])),
    "pick": lambda t: T.pick(t, np.array([0, 3, 1])),
    "concat": lambda t: T.concat([t, T.mul(t, 2.0)], axis=1),
}


def _binary(name):
    rng = np.random.default_rng(11)
    other = rng.uniform(0.5, 1.5, size=(3, 4))
    row = rng.uniform(0.5, 1.5, size=(4,))
    right = rng.normal(size=(4, 2))
    left = rng.normal(size=(5, 3))
    return {
        "add": lambda t: T.add(t, row),
        "sub": lambda t: T.sub(other, t),
        "mul": lambda t: T.mul(t, other),
        "div_num": lambda t: T.div(t, other),
        "div_den": lambda t: T.div(other, T.add(T.mul(t, t), 1.0)),
        "matmul_left": lambda t: T.matmul(t, right),
        "matmul_right": lambda t: T.matmul(left, t),
    }[name]


@pytest.mark.parametrize("name", sorted(UNARY) + ["add", "sub", "mul", "div_num", "div_den",
                                                  "matmul_left", "matmul_right"])
def test_every_op_matches_finite_differences(name):
    """100 seeded random inputs per operation, weighted sum readout."""
    f = UNARY.get(name) or _binary(name)
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(3, 4))
        if name == "relu":
            x = x + np.sign(x) * 0.01  # stay away from the kink
        readout = np.random.default_rng(1000 + seed)
        probe = f(T.Tensor(x)).data
        weights = readout.normal(size=probe.shape)
        worst = max(worst, T.finite_diff_check(lambda t: T.sum(T.mul(f(t), weights)), x))
    assert worst < 1e-4


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 5, 6, 3))
    w = rng.normal(size=(3, 3, 3, 4))
    ref = np.zeros((2, 5, 6, 4))
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    for n in range(2):
        for i in range(5):
            for j in range(6):
                for co in range(4):
                    ref[n, i, j, co] = sum(
                        xp[n, i + a, j + b, ci] * w[a, b, ci, co]
                        for a in range(3) for b in range(3) for ci in range(3))
    np.testing.assert_allclose(T.conv2d(x, w).data, ref, atol=1e-12)


@pytest.mark.parametrize("wrt", ["input", "weight", "bias"])
def test_conv2d_gradients(wrt):
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 4, 5, 2))
    w = rng.normal(size=(3, 3, 2, 3))
    b = rng.normal(size=3)
    probe = rng.normal(size=(2, 4, 5, 3))
    fns = {
        "input": (lambda t: T.sum(T.mul(T.conv2d(t, w, b), probe)), x),
        "weight": (lambda t: T.sum(T.mul(T.conv2d(x, t, b), probe)), w),
        "bias": (lambda t: T.sum(T.mul(T.conv2d(x, w, t), probe)), b),
    }
    f, at = fns[wrt]
    assert T.finite_diff_check(f, at) < 1e-4


def test_forward_is_bit_identical_across_runs():
    x = np.random.default_rng(9).normal(size=(2, 4, 4, 2))
    a = _composite(T.Tensor(x)).data
    b = _composite(T.Tensor(x)).data
    assert a.tobytes() == b.tobytes()


def test_take_out_of_range():
    with pytest.raises(IndexError):
        T.take(T.Tensor(np.zeros((3, 2))), [3])
