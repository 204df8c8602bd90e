import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from i2vmatch import autodiff as ad
from i2vmatch.autodiff import (
    ShapeError,
    Tape,
    Tensor,
    backward,
    concat_rows,
    frobenius_sq,
    gather,
    grad_check,
    log_softmax_rows,
    matmul,
    mean_all,
    mean_row_groups,
    mean_rows,
    pairwise_euclidean,
    relu,
    softmax_rows,
    sum_all,
    transpose,
)


@pytest.fixture(autouse=True)
def fresh_tape():
    with Tape():
        yield


def rand(rng, *shape):
    return Tensor(rng.standard_normal(shape))


# ---------------------------------------------------------------------------
# forward values
# ---------------------------------------------------------------------------

def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = matmul(Tensor(np.eye(2)), a)
    np.testing.assert_array_equal(out.data, a.data)


def test_matmul_dot_product():
    out = matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.data, [[11.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


def test_softmax_symmetry():
    out = softmax_rows(Tensor([[0.0, 0.0, 0.0]]))
    np.testing.assert_allclose(out.data, [[1 / 3] * 3], rtol=0, atol=1e-15)


def test_softmax_extreme_logits_no_overflow():
    out = softmax_rows(Tensor([[1000.0, 0.0]]))
    assert np.all(np.isfinite(out.data))
    np.testing.assert_allclose(out.data, [[1.0, 0.0]], atol=1e-300)


@settings(max_examples=50)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2 ** 31 - 1))
def test_softmax_rows_sum_to_one(m, n, seed):
    rng = np.random.default_rng(seed)
    x = 10.0 * rng.standard_normal((m, n))
    with Tape():
        y = softmax_rows(Tensor(x)).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=1), np.ones(m), rtol=0, atol=1e-12)


def test_pairwise_zero_distance_is_epsilon():
    out = pairwise_euclidean(Tensor([[0.0, 0.0]]), Tensor([[0.0, 0.0]]))
    assert out.data[0, 0] == pytest.approx(0.0, abs=1e-5)
    assert out.data[0, 0] == pytest.approx(np.sqrt(ad.DISTANCE_EPS))


def test_pairwise_3_4_5():
    out = pairwise_euclidean(Tensor([[0.0, 0.0]]), Tensor([[3.0, 4.0]]))
    assert out.data[0, 0] == pytest.approx(5.0, abs=1e-9)


def test_pairwise_matches_loop_oracle():
    rng = np.random.default_rng(7)
    x, y = rng.standard_normal((4, 3)), rng.standard_normal((5, 3))
    got = pairwise_euclidean(Tensor(x), Tensor(y)).data
    want = np.zeros((4, 5))
    for i in range(4):
        for j in range(5):
            want[i, j] = np.sqrt(np.sum((x[i] - y[j]) ** 2) + ad.DISTANCE_EPS)
    assert np.abs(got - want).max() <= 1e-10


@settings(max_examples=30)
@given(st.integers(1, 8), st.integers(1, 5), st.integers(0, 2 ** 31 - 1))
def test_pairwise_self_symmetric_zero_diagonal(m, d, seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((m, d)))
    with Tape():
        dm = pairwise_euclidean(x, x).data
    np.testing.assert_array_equal(dm, dm.T)
    assert np.abs(np.diag(dm)).max() <= 1e-5


def test_relu_sign_split():
    np.testing.assert_array_equal(relu(Tensor([[-1.0, 2.0]])).data, [[0.0, 2.0]])


def test_frobenius_sq_value():
    assert frobenius_sq(Tensor([[1.0, 2.0], [3.0, 4.0]])).item() == 30.0


def test_mean_all_value():
    assert mean_all(Tensor([[2.0, 4.0], [6.0, 8.0]])).item() == 5.0


def test_mean_rows_and_groups():
    x = Tensor(np.arange(12, dtype=float).reshape(4, 3))
    np.testing.assert_allclose(mean_rows(x).data, [[4.5, 5.5, 6.5]])
    g = mean_row_groups(x, 2)
    np.testing.assert_allclose(g.data, [[1.5, 2.5, 3.5], [7.5, 8.5, 9.5]])


def test_gather_and_concat():
    x = Tensor(np.arange(6, dtype=float).reshape(2, 3))
    np.testing.assert_array_equal(gather(x, [0, 1], [2, 0]).data, [2.0, 3.0])
    c = concat_rows([x, Tensor([[9.0, 9.0, 9.0]])])
    assert c.data.shape == (3, 3)


# ---------------------------------------------------------------------------
# backward values
# ---------------------------------------------------------------------------

def test_backward_sum_is_ones():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    backward(sum_all(x))
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])


def test_backward_squared_norm():
    x = Tensor([1.0, 2.0], requires_grad=True)
    backward(sum_all(ad.square(x)))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(ad.square(x))


def test_backward_additivity():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
    l1 = sum_all(ad.square(x))
    l2 = mean_all(relu(x))
    backward(l1)
    backward(l2)
    split = x.grad.copy()
    x.zero_grad()
    backward(l1 + l2)
    np.testing.assert_allclose(x.grad, split, rtol=0, atol=0)


def test_stop_gradient_blocks_flow():
    x = Tensor([[1.0, 2.0]], requires_grad=True)
    y = x.detach()
    assert not y.requires_grad
    loss = sum_all(ad.square(y))
    assert not loss.requires_grad
    with pytest.raises(ValueError):
        backward(loss)
    assert x.grad is None


def test_tape_reverse_execution_order():
    tape = ad.active_tape()
    x = Tensor([[1.0, 2.0]], requires_grad=True)
    a = relu(x)
    b = ad.square(a)
    c = sum_all(b)
    outs = [e.out for e in tape.entries]
    assert outs == [a, b, c]
    backward(c)
    assert x.grad is not None


# ---------------------------------------------------------------------------
# finite-difference checks
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_gradcheck_matmul(seed):
    rng = np.random.default_rng(seed)
    b = rand(rng, 4, 2)

    def f(x):
        return sum_all(ad.square(matmul(x, b)))

    rep = grad_check(f, rand(rng, 3, 4))
    assert rep.passed and rep.max_rel_err <= 1e-6


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_gradcheck_softmax(seed):
    rng = np.random.default_rng(seed)

    def f(x):
        return sum_all(ad.square(softmax_rows(x)))

    rep = grad_check(f, rand(rng, 4, 5))
    assert rep.passed and rep.max_rel_err <= 1e-6


def test_gradcheck_softmax_first_component():
    rng = np.random.default_rng(11)

    def f(x):
        return gather(softmax_rows(x), [0], [0]).sum()

    rep = grad_check(f, rand(rng, 1, 5))
    assert rep.max_rel_err <= 1e-6


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
@pytest.mark.parametrize(
    "make",
    [
        lambda x: sum_all(relu(x)),
        lambda x: mean_all(ad.square(x)),
        lambda x: frobenius_sq(x),
        lambda x: sum_all(ad.square(log_softmax_rows(x))),
        lambda x: sum_all(ad.square(mean_row_groups(x, 2))),
        lambda x: sum_all(ad.square(transpose(x))),
        lambda x: sum_all(ad.square(ad.shift(ad.scale(x, 1.7), 0.3))),
    ],
    ids=["relu", "sq-mean", "frob", "logsoftmax", "groupmean", "transpose", "affine"],
)
def test_gradcheck_elementwise_suite(seed, make):
    rng = np.random.default_rng(seed)
    rep = grad_check(make, rand(rng, 4, 6))
    assert rep.passed, rep


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_gradcheck_pairwise_euclidean(seed):
    rng = np.random.default_rng(seed)
    y = rand(rng, 5, 3)

    def f(x):
        return sum_all(pairwise_euclidean(x, y))

    rep = grad_check(f, rand(rng, 4, 3))
    assert rep.passed, rep


def test_gradcheck_linear_is_exact():
    rep = grad_check(sum_all, Tensor(np.array([[1.0, -2.0, 0.5]])))
    assert rep.max_rel_err <= 1e-9


def test_gradcheck_detects_planted_factor_two():
    # broken primitive: doubles the true gradient
    def bad_double(x):
        out = Tensor(x.data * 1.0)

        def bw(g):
            return (2.0 * g,)

        return ad._record(out, (x,), bw)

    def f(x):
        return sum_all(ad.square(bad_double(x)))

    rep = grad_check(f, Tensor(np.array([[1.0, 2.0], [0.5, 1.5]])))
    assert not rep.passed
    assert rep.max_rel_err == pytest.approx(1.0, rel=1e-3)


def test_gradcheck_reports_nonfinite_coordinate():
    def f(x):
        # log goes NaN once the perturbed coordinate turns negative
        with np.errstate(invalid="ignore"):
            bad = Tensor(np.log(x.data))
        return sum_all(ad._record(bad, (x,), lambda g: (g / x.data,)))

    with pytest.raises(ad.NonFiniteError, match="coordinate"):
        grad_check(f, Tensor(np.array([[1e-6, 1.0]])))


def test_no_grad_disables_recording():
    x = Tensor([[1.0]], requires_grad=True)
    with ad.no_grad():
        y = ad.square(x)
    assert not y.requires_grad
