import numpy as np
import pytest
from hypothesis import given, strategies as st

from dorl.core import autograd as ag
from dorl.core.autograd import Tensor, count_ops, no_grad
from dorl.core.gradcheck import REGISTERED_OPS, check_function, grad_check
from dorl.errors import NumericError, ShapeError, UnsupportedOpError

SHAPES = [(3,), (2, 4), (3, 2, 3)]


@pytest.mark.parametrize("op", REGISTERED_OPS)
@pytest.mark.parametrize("shape", SHAPES)
def test_registered_op_gradients(op, shape):
    if op in ("matmul", "transpose") and len(shape) == 1:
        shape = (2, 3)
    if op == "cross_entropy" and len(shape) != 2:
        shape = (2, 3) if len(shape) == 1 else (4, 5)
    rep = grad_check(op, shape, seed=len(shape))
    assert rep.passed(1e-4), (op, shape, rep)


def test_unknown_op_rejected():
    with pytest.raises(UnsupportedOpError):
        grad_check("fft", (3,))


def test_eps_range_enforced():
    with pytest.raises(ValueError):
        grad_check("add", (3,), eps=1e-2)


def test_callable_grad_check():
    rep = grad_check(lambda x: ag.sum_(ag.exp(x) * x), (4,))
    assert rep.passed(1e-5)


def test_gradcheck_catches_wrong_gradient():
    def bad(x):
        return ag.custom_op(x.data ** 2, "bad", (x,), lambda g: (g * x.data,))
    rep = grad_check(bad, (5,))
    assert not rep.passed(1e-4)


@given(st.sampled_from([((2, 3), (3,)), ((4, 1), (1, 5)), ((2, 1, 3), (4, 1))]),
       st.integers(0, 10_000))
def test_broadcast_gradients_match_finite_differences(shapes, seed):
    r = np.random.default_rng(seed)
    a, b = r.standard_normal(shapes[0]), r.standard_normal(shapes[1])
    rep = check_function(lambda x, y: x * y + x / (1.5 + y * y), [a, b], seed=seed)
    assert rep.max_rel_err <= 1e-4


@given(st.integers(0, 10_000))
def test_gradient_accumulates_over_reuse(seed):
    x = np.random.default_rng(seed).standard_normal(4)
    t = Tensor(x, requires_grad=True)
    (t * t + t).backward(np.ones(4))
    np.testing.assert_allclose(t.grad, 2 * x + 1)


def test_nonfinite_forward_names_op():
    with pytest.raises(NumericError) as exc, np.errstate(invalid="ignore"):
        ag.log(Tensor(np.array([1.0, -1.0])))
    assert exc.value.op == "log"


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        ag.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(ShapeError):
        ag.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_gather_unique_matches_general_path(rng):
    x = rng.standard_normal((2, 5, 3))
    idx = np.stack([rng.permutation(5) for _ in range(2)])[..., None]
    w = rng.standard_normal((2, 5, 3))
    grads = []
    for unique in (False, True):
        t = Tensor(x.copy(), requires_grad=True)
        ag.gather(t, idx, axis=1, unique=unique).backward(w)
        grads.append(t.grad)
    np.testing.assert_array_equal(grads[0], grads[1])


def test_gather_repeated_index_accumulates():
    t = Tensor(np.arange(3.0), requires_grad=True)
    ag.gather(t, np.array([0, 0, 2]), axis=0).backward(np.ones(3))
    np.testing.assert_array_equal(t.grad, [2.0, 0.0, 1.0])


def test_op_counter_counts_matmul_flops():
    with count_ops() as c:
        ag.matmul(Tensor(np.ones((4, 3))), Tensor(np.ones((3, 2))))
    assert c.calls["matmul"] == 1
    assert c.flops["matmul"] == 4 * 3 * 2


def test_float32_stays_float32():
    x = Tensor(np.ones((2, 3), dtype=np.float32))
    for y in (ag.gelu(x), ag.layer_norm(x, Tensor(np.ones(3, np.float32)),
                                        Tensor(np.zeros(3, np.float32))), ag.softmax(x) * 0.5):
        assert y.dtype == np.float32


def test_softmax_rows_sum_to_one(rng):
    p = ag.softmax(Tensor(rng.standard_normal((5, 7)) * 30)).data
    np.testing.assert_allclose(p.sum(-1), 1.0, rtol=1e-12)
