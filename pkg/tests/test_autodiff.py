import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from attnguide import autodiff as ad
from attnguide.autodiff import ShapeError, Tape, TapeError, Tensor, backward, finite_diff_check, grad


def small(shape):
    return arrays(np.float64, shape, elements=st.floats(-2, 2, allow_nan=False, width=64))


def test_doc_example():
    tape = Tape()
    x = tape.watch(Tensor([1.0, 2.0]))
    g = backward((x * x).sum(), tape)
    assert np.array_equal(g[x.id], [2.0, 4.0])


@pytest.mark.parametrize("f", [
    lambda x: (x * x * 3.0).sum(),
    lambda x: ad.exp(x * 0.5).sum(),
    lambda x: ad.log(x * x + 1.0).sum(),
    lambda x: ad.gelu(x).sum(),
    lambda x: (x / (x * x + 2.0)).sum(),
    lambda x: ad.softmax_lastdim(x)[0, 1] * 3.0 + ad.softmax_lastdim(x)[1, 2],
    lambda x: ad.log_softmax_lastdim(x)[1, 0],
    lambda x: (ad.layernorm(x, np.array([1.0, 2.0, 0.5]), np.array([0.1, 0.0, -0.2]))[0, 0]
               + ad.layernorm(x, np.ones(3), np.zeros(3))[1, 2] * 2.0),
    lambda x: (x @ x.transpose()).sum(),
    lambda x: ad.concat([x, x * 2.0], axis=0).mean(),
    lambda x: x.reshape(3, 2).transpose()[1].sum(),
])
def test_ops_match_central_differences(f):
    x = np.random.default_rng(0).standard_normal((2, 3))
    assert finite_diff_check(f, x, eps=1e-5) < 1e-6


@settings(max_examples=30, deadline=None)
@given(small((3, 4)), small((4,)))
def test_broadcast_add_mul_grad(a, b):
    tape = Tape()
    ta, tb = tape.watch(Tensor(a)), tape.watch(Tensor(b))
    g = backward(((ta + tb) * tb).sum(), tape)
    assert np.allclose(g[ta.id], np.broadcast_to(b, a.shape))
    assert np.allclose(g[tb.id], (a + 2 * b).sum(axis=0))


@settings(max_examples=20, deadline=None)
@given(small((2, 3, 4)), small((2, 4, 5)))
def test_batched_matmul_grad(a, b):
    tape = Tape()
    ta, tb = tape.watch(Tensor(a)), tape.watch(Tensor(b))
    g = backward((ta @ tb).sum(), tape)
    ones = np.ones((2, 3, 5))
    assert np.allclose(g[ta.id], ones @ b.transpose(0, 2, 1))
    assert np.allclose(g[tb.id], a.transpose(0, 2, 1) @ ones)


def test_getitem_accumulates_repeated_indices():
    tape = Tape()
    x = tape.watch(Tensor(np.arange(4.0)))
    g = backward(x[np.array([1, 1, 3])].sum(), tape)
    assert np.array_equal(g[x.id], [0.0, 2.0, 0.0, 1.0])


def test_softmax_is_shift_stable():
    x = Tensor(np.array([[1000.0, 1001.0, 1002.0]]))
    s = ad.softmax_lastdim(x).data
    assert np.all(np.isfinite(s))
    assert np.isclose(s.sum(), 1.0)


def test_unused_watched_gets_zero_grad():
    tape = Tape()
    x = tape.watch(Tensor([1.0, 2.0]))
    y = tape.watch(Tensor([[3.0]]))
    g = backward((x * 2.0).sum(), tape)
    assert np.array_equal(g[y.id], np.zeros((1, 1)))


def test_watched_intermediate_gets_gradient():
    tape = Tape()
    x = tape.watch(Tensor([1.0, 2.0]))
    y = tape.watch(x * 3.0)
    g = backward((y * y).sum(), tape)
    assert np.allclose(g[y.id], 2 * y.data)
    assert np.allclose(g[x.id], 18 * x.data)


def test_nonscalar_loss_rejected():
    tape = Tape()
    x = tape.watch(Tensor([1.0, 2.0]))
    with pytest.raises(ShapeError):
        backward(x * 2.0, tape)


def test_loss_from_other_tape_rejected():
    t1, t2 = Tape(), Tape()
    x = t1.watch(Tensor([1.0]))
    with pytest.raises(TapeError):
        backward((x * 2.0).sum(), t2)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_item_requires_scalar():
    with pytest.raises(ShapeError):
        Tensor([1.0, 2.0]).item()


def test_constants_do_not_record():
    tape = Tape()
    x = tape.watch(Tensor([1.0]))
    n = len(tape.nodes)
    _ = Tensor([2.0]) * Tensor([3.0])
    assert len(tape.nodes) == n
    _ = x * 2.0
    assert len(tape.nodes) == n + 1


def test_gelu_matches_erf_form():
    from scipy.special import erf

    x = np.linspace(-4, 4, 17)
    assert np.allclose(ad.gelu(Tensor(x)).data, 0.5 * x * (1 + erf(x / np.sqrt(2))), atol=0, rtol=1e-15)


def test_grad_helper():
    assert np.allclose(grad(lambda t: (t * t).sum(), np.array([3.0])), [6.0])


def test_max_rel_error_floor():
    assert ad.max_rel_error([0.0], [1e-12]) == pytest.approx(1e-4)
