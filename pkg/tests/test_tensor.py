import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from duallab.tensor import (
    ShapeError,
    TapeError,
    Tensor,
    backward,
    build_tape,
    cross_entropy_per_token,
    finite_difference_check,
    gelu,
    layer_norm,
    log_sigmoid,
    matmul,
    softmax_rows,
)


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# --------------------------------------------------------------------- matmul

def test_matmul_identity():
    out = matmul(Tensor(np.eye(2)), Tensor([[3.0, 4.0], [5.0, 6.0]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_hand_product():
    assert matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 5)))
    assert finite_difference_check(lambda: matmul(a, b).sum(), [a, b]) < 1e-6


def test_matmul_backward_rule():
    rng = np.random.default_rng(1)
    a, b = leaf(rng.normal(size=(2, 3))), leaf(rng.normal(size=(3, 2)))
    g = rng.normal(size=(2, 2))
    backward((matmul(a, b) * g).sum())
    np.testing.assert_allclose(a.grad, g @ b.data.T, rtol=1e-12)
    np.testing.assert_allclose(b.grad, a.data.T @ g, rtol=1e-12)


# -------------------------------------------------------------------- softmax

def test_softmax_uniform_row():
    np.testing.assert_allclose(softmax_rows(Tensor([[0.0, 0, 0, 0]])).data, [[0.25] * 4], atol=1e-15)


@pytest.mark.parametrize("c", [-50.0, 0.0, 3.7, 700.0])
def test_softmax_shift_case(c):
    np.testing.assert_allclose(softmax_rows(Tensor([[c, c + math.log(3)]])).data, [[0.25, 0.75]], atol=1e-12)


def test_softmax_rows_sum_to_one():
    x = np.random.default_rng(2).normal(scale=5.0, size=(100, 17))
    out = softmax_rows(Tensor(x)).data
    sums = [math.fsum(row) for row in out]  # independent summation
    assert max(abs(s - 1.0) for s in sums) < 1e-12


def test_softmax_rejects_nan():
    with pytest.raises(ValueError):
        softmax_rows(Tensor([[0.0, np.nan]]))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 6), elements=st.floats(-30, 30)), st.floats(-100, 100))
def test_softmax_shift_invariance(x, c):
    a = softmax_rows(Tensor(x)).data
    b = softmax_rows(Tensor(x + c)).data
    np.testing.assert_allclose(a, b, atol=1e-12)
    np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-12)


# ------------------------------------------------------------------ layer norm

def test_layer_norm_constant_row_maps_to_bias():
    out = layer_norm(Tensor([[5.0, 5, 5, 5]]), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, [[0.0, 0, 0, 0]])


def test_layer_norm_zero_mean_rows():
    x = np.random.default_rng(3).normal(loc=4.0, size=(20, 8))
    out = layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    assert np.abs(out.mean(axis=1)).max() < 1e-10
    np.testing.assert_allclose(out.var(axis=1), 1.0, rtol=1e-3)


def test_layer_norm_gradient():
    rng = np.random.default_rng(4)
    x, g, b = leaf(rng.normal(size=(3, 5, 6))), leaf(rng.normal(size=6)), leaf(rng.normal(size=6))
    w = rng.normal(size=(3, 5, 6))
    assert finite_difference_check(lambda: (layer_norm(x, g, b) * w).sum(), [x, g, b]) < 1e-6


def test_layer_norm_gain_shape_checked():
    with pytest.raises(ShapeError):
        layer_norm(Tensor(np.ones((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(4)))


# --------------------------------------------------------------- cross entropy

def test_cross_entropy_uniform_is_log_v():
    ce = cross_entropy_per_token(Tensor(np.zeros((5, 16))), [0, 3, 7, 15, 2], [True] * 5)
    np.testing.assert_allclose(ce.data, math.log(16), rtol=0, atol=1e-15)
    assert abs(ce.data[0] - 2.7725887) < 1e-7


def test_cross_entropy_dominant_target_goes_to_zero():
    logits = np.zeros((1, 8))
    logits[0, 5] = 800.0
    assert cross_entropy_per_token(Tensor(logits), [5], [True]).data[0] == pytest.approx(0.0, abs=1e-300)


def test_cross_entropy_mask_zeros_positions():
    ce = cross_entropy_per_token(Tensor(np.zeros((3, 4))), [0, 1, 2], [True, False, True])
    assert ce.data[1] == 0.0 and ce.data[0] > 0


def test_cross_entropy_normalizes_over_vocabulary():
    logits = np.random.default_rng(5).normal(size=(1, 35))
    total = math.fsum(
        math.exp(-cross_entropy_per_token(Tensor(logits), [v], [True]).data[0]) for v in range(35)
    )
    assert abs(total - 1.0) < 1e-12


def test_cross_entropy_index_out_of_range():
    with pytest.raises(IndexError):
        cross_entropy_per_token(Tensor(np.zeros((2, 4))), [0, 4], [True, True])


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (4, 9), elements=st.floats(-20, 20)), st.lists(st.integers(0, 8), min_size=4, max_size=4))
def test_cross_entropy_nonnegative(x, t):
    assert (cross_entropy_per_token(Tensor(x), t, [True] * 4).data >= 0).all()


# ------------------------------------------------------------------- backward

def test_backward_sum_gives_ones():
    x = leaf(np.random.default_rng(6).normal(size=(2, 3, 4)))
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_square():
    x = leaf(3.0)
    backward(x * x)
    assert x.grad == 6.0


def test_backward_non_scalar_root():
    with pytest.raises(ShapeError):
        backward(leaf([1.0, 2.0]) * 2.0)


def test_backward_twice_is_an_error():
    x = leaf(2.0)
    y = x * x
    backward(y)
    with pytest.raises(TapeError):
        backward(y)


def test_backward_detects_cycle():
    x = leaf(1.0)
    y = x * 2.0
    z = y * 3.0
    y._parents = (z,)  # corrupt the tape
    with pytest.raises(TapeError, match="cycle"):
        backward(z)


def test_tape_is_topological():
    x = leaf(np.ones(3))
    y = (x * 2.0 + x).sum()
    tape = build_tape(y)
    pos = {id(n): i for i, n in enumerate(tape)}
    for n in tape:
        for p in n._parents:
            if id(p) in pos:
                assert pos[id(p)] < pos[id(n)]
    assert len({id(n) for n in tape}) == len(tape)


def test_shared_subexpression_accumulates():
    x = leaf(1.5)
    y = x * x
    backward(y * y + y)  # x^4 + x^2
    assert x.grad == pytest.approx(4 * 1.5**3 + 2 * 1.5, rel=1e-14)


def test_replay_gives_bit_identical_gradients():
    def run():
        rng = np.random.default_rng(7)
        a, b = leaf(rng.normal(size=(4, 4))), leaf(rng.normal(size=(4, 3)))
        backward(log_sigmoid(gelu(matmul(a, b))).sum())
        return a.grad.tobytes() + b.grad.tobytes()

    assert run() == run()


# --------------------------------------------------------- finite differences

def test_fd_check_quadratic():
    rng = np.random.default_rng(8)
    theta = leaf(rng.uniform(0.5, 2.0, size=8) * rng.choice([-1, 1], size=8))
    assert finite_difference_check(lambda: (theta * theta).sum(), [theta], h=1e-5) < 1e-9


def test_fd_check_linear():
    # dyadic values and step keep every perturbed evaluation exact
    theta = leaf(np.random.default_rng(9).integers(-64, 64, size=40) / 8.0)
    w = np.random.default_rng(10).integers(1, 16, size=40) / 4.0
    assert finite_difference_check(lambda: (theta * w).sum(), [theta], h=2.0**-16) < 1e-12


def test_fd_check_detects_wrong_backward():
    from duallab import tensor as T

    x = leaf(np.random.default_rng(11).normal(size=10))

    def bad_square(t):
        return T._make(t.data**2, (t,), lambda g: (g * t.data,), "bad")  # missing factor 2

    assert finite_difference_check(lambda: bad_square(x).sum(), [x]) > 0.4


def test_fd_check_rejects_nonpositive_h():
    with pytest.raises(ValueError):
        finite_difference_check(lambda: leaf(1.0) * 1.0, [], h=0.0)


@pytest.mark.parametrize("fn", [gelu, log_sigmoid, softmax_rows])
def test_elementwise_ops_gradients(fn):
    x = leaf(np.random.default_rng(12).normal(scale=2.0, size=(4, 6)))
    w = np.random.default_rng(13).normal(size=(4, 6))
    assert finite_difference_check(lambda: (fn(x) * w).sum(), [x]) < 1e-6
