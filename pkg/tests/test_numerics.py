import math
import zlib
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.special import erf, log_softmax as sp_log_softmax, rel_entr, softmax as sp_softmax

from vcil import numerics as nx
from vcil.numerics import Tensor

from oracle import grad_check, op_catalogue

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def test_primitive_examples():
    m = np.random.default_rng(0).normal(size=(3, 3))
    assert np.array_equal(nx.matmul(Tensor(np.eye(3)), Tensor(m)).data, m)
    assert nx.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).values == [4.0, 6.0]
    out = nx.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
    assert out.data.tolist() == [[17.0], [39.0]]


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(nx.ShapeError, match=r"\[2, 3\].*\[4\]"):
        nx.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(4)))
    with pytest.raises(nx.ShapeError):
        nx.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_activation_examples():
    assert np.allclose(nx.softmax(Tensor([0.0, 0.0, 0.0])).data, 1 / 3)
    assert nx.gelu(Tensor([0.0])).item() == 0.0
    assert np.allclose(nx.softmax(Tensor([1.0, 2.0])).data, [0.26894, 0.73106], atol=1e-4)
    with pytest.raises(nx.ShapeError):
        nx.softmax(Tensor(np.zeros((2, 0))))


def test_gelu_matches_erf_form():
    x = np.linspace(-4, 4, 41)
    assert np.allclose(nx.gelu(Tensor(x)).data, 0.5 * x * (1 + erf(x / math.sqrt(2))), atol=1e-14)


def test_cross_entropy_examples():
    z = np.full(4, -100.0)
    z[2] = 100.0
    assert nx.cross_entropy(Tensor(z), 2).item() == pytest.approx(0.0, abs=1e-12)
    assert nx.cross_entropy(Tensor(np.zeros(7)), 3).item() == pytest.approx(math.log(7))
    assert nx.cross_entropy(Tensor([1.0, 2.0]), 0).item() == pytest.approx(1.31326, abs=1e-4)
    with pytest.raises(ValueError, match="out of range"):
        nx.cross_entropy(Tensor([1.0, 2.0]), 2)


def test_kl_examples():
    z = Tensor([0.3, -1.2, 2.0])
    assert nx.kl_divergence(z, z).item() == 0.0
    assert nx.kl_divergence(Tensor([0.0, 0.0]), Tensor([0.0, 0.0])).item() == 0.0
    p = Tensor(np.log([0.9, 0.1]))
    q = Tensor(np.log([0.5, 0.5]))
    assert nx.kl_divergence(p, q).item() == pytest.approx(0.36795, abs=1e-3)
    assert nx.kl_divergence(p, q).item() == pytest.approx(rel_entr([0.9, 0.1], [0.5, 0.5]).sum(), abs=1e-12)
    with pytest.raises(nx.ShapeError):
        nx.kl_divergence(Tensor([0.0, 1.0]), Tensor([0.0, 1.0, 2.0]))


def test_kl_identical_inputs_zero_gradient():
    p = Tensor(np.random.default_rng(1).normal(size=(3, 4)), requires_grad=True)
    q = Tensor(p.data.copy(), requires_grad=True)
    nx.backward(nx.kl_divergence(p, q))
    assert not p.grad.any() and not q.grad.any()


def test_cosine_examples():
    assert nx.cosine_similarity(Tensor([1.0, 0.0]), Tensor([1.0, 0.0])).item() == 1.0
    assert nx.cosine_similarity(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == 0.0
    assert nx.cosine_similarity(Tensor([1.0, 2.0]), Tensor([2.0, 1.0])).item() == pytest.approx(0.8)


def test_cosine_zero_vector_convention():
    a = Tensor([0.0, 0.0], requires_grad=True)
    with pytest.warns(nx.DegenerateCosineWarning):
        c = nx.cosine_similarity(a, Tensor([1.0, 2.0]))
    assert c.item() == 0.0
    nx.backward(c)
    assert not a.grad.any()


def test_backward_examples():
    x = Tensor([3.0], requires_grad=True)
    nx.backward(nx.mul(x, x))
    assert x.grad.tolist() == [6.0]
    y = Tensor([0.5, -1.0, 2.0], requires_grad=True)
    nx.backward(nx.sum_(nx.softmax(y)))
    assert np.allclose(y.grad, 0.0, atol=1e-15)
    with pytest.raises(nx.ShapeError):
        nx.backward(nx.mul(Tensor([1.0, 2.0], requires_grad=True), 2.0))


def test_backward_accumulates_across_calls():
    x = Tensor([2.0], requires_grad=True)
    nx.backward(nx.mul(x, x))
    nx.backward(nx.mul(x, x))
    assert x.grad.tolist() == [8.0]


def test_shared_subgraph_gradients_sum():
    x = Tensor([1.5], requires_grad=True)
    y = nx.exp(x)
    nx.backward(nx.add(y, nx.mul(y, y)))  # e^x + e^2x
    assert x.grad[0] == pytest.approx(math.exp(1.5) + 2 * math.exp(3.0))


def test_random_composite_graph_matches_fd():
    rng = np.random.default_rng(3)
    for _ in range(20):
        err = grad_check(lambda a, b: nx.sum_(nx.gelu(nx.matmul(nx.softmax(a), b))),
                         [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))])
        assert err < 1e-4


def test_fd_examples():
    g = nx.finite_difference_check(lambda x: float((x ** 2).sum()), np.array([1.0, 2.0]))
    assert np.allclose(g, [2.0, 4.0], atol=1e-5)
    assert not nx.finite_difference_check(lambda x: 3.0, np.ones(4)).any()
    z = np.random.default_rng(0).normal(size=(1, 5))
    t = Tensor(z, requires_grad=True)
    nx.backward(nx.cross_entropy(t, [1]))
    num = nx.finite_difference_check(lambda x: nx.cross_entropy(Tensor(x), [1]).item(), z)
    assert nx.relative_error(t.grad, num) < 1e-4


@pytest.mark.parametrize("name,make", op_catalogue(), ids=[n for n, _ in op_catalogue()])
def test_op_gradients(name, make):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(4):
        fn, args = make(rng)
        assert grad_check(fn, args) < 1e-4, name


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
def test_softmax_matches_scipy(x):
    assert np.allclose(nx.softmax(Tensor(x)).data, sp_softmax(x, axis=-1), atol=1e-12)
    assert np.allclose(nx.log_softmax(Tensor(x)).data, sp_log_softmax(x, axis=-1), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 5), elements=finite), arrays(np.float64, (3, 5), elements=finite))
def test_kl_nonnegative_and_matches_rel_entr(p, q):
    val = nx.kl_divergence(Tensor(p), Tensor(q)).item()
    ref = rel_entr(sp_softmax(p, axis=-1), sp_softmax(q, axis=-1)).sum(axis=-1).mean()
    assert val >= -1e-15
    assert val == pytest.approx(ref, abs=1e-10)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, 6, elements=finite), arrays(np.float64, 6, elements=finite),
       st.floats(0.1, 10))
def test_cosine_bounded_and_scale_invariant(a, b, c):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", nx.DegenerateCosineWarning)
        v = nx.cosine_similarity(Tensor(a), Tensor(b)).item()
        w = nx.cosine_similarity(Tensor(a * c), Tensor(b)).item()
    assert -1.0 <= v <= 1.0
    assert v == pytest.approx(w, abs=1e-9)


def test_layer_norm_matches_reference():
    x = np.random.default_rng(2).normal(size=(4, 7))
    ref = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5)
    assert np.allclose(nx.layer_norm(Tensor(x)).data, ref, atol=1e-12)


def test_broadcast_rules():
    assert nx.broadcast_shape((2, 3, 4), (4,)) == (2, 3, 4)
    assert nx.broadcast_shape((1,), (2, 3)) == (2, 3)
    with pytest.raises(nx.ShapeError):
        nx.broadcast_shape((2, 3), (3, 2))


def test_no_grad_builds_no_tape():
    x = Tensor([1.0], requires_grad=True)
    with nx.no_grad():
        y = nx.mul(x, 2.0)
    assert not y.requires_grad and nx.grad_enabled()
