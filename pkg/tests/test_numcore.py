import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from occscene.errors import DomainError, ShapeMismatch
from occscene.numcore import Streams, broadcast_shape, conv, elementwise, grad_check, matmul


def test_exp_of_zero_is_one():
    assert torch.equal(elementwise("exp", torch.zeros(5)), torch.ones(5))


def test_sigmoid_of_zero_is_half():
    assert torch.equal(elementwise("sigmoid", torch.zeros(3)), torch.full((3,), 0.5))


def test_add_and_its_gradient():
    a = torch.tensor([1.0, 2.0], dtype=torch.float64, requires_grad=True)
    b = torch.tensor([3.0, 4.0], dtype=torch.float64, requires_grad=True)
    out = elementwise("add", a, b)
    assert out.tolist() == [4.0, 6.0]
    out.sum().backward()
    assert a.grad.tolist() == [1.0, 1.0] and b.grad.tolist() == [1.0, 1.0]
    rep = grad_check(lambda x: elementwise("add", x[:2], x[2:]).sum(), torch.tensor([1.0, 2, 3, 4], dtype=torch.float64))
    assert rep.passed


def test_elementwise_domain_errors():
    with pytest.raises(DomainError):
        elementwise("log", torch.tensor([1.0, 0.0]))
    with pytest.raises(DomainError):
        elementwise("sqrt", torch.tensor([-1.0]))
    with pytest.raises(DomainError):
        elementwise("div", torch.ones(2), torch.tensor([1.0, 0.0]))
    with pytest.raises(ShapeMismatch):
        elementwise("add", torch.ones(2, 3), torch.ones(4))
    with pytest.raises(ValueError):
        elementwise("tanh", torch.ones(2))


def test_matmul_identity_and_hand_value():
    m = torch.randn(3, 5, dtype=torch.float64)
    assert torch.equal(matmul(torch.eye(3, dtype=torch.float64), m), m)
    assert matmul(torch.tensor([[1.0, 2.0]]), torch.tensor([[3.0], [4.0]])).tolist() == [[11.0]]
    with pytest.raises(ShapeMismatch):
        matmul(torch.ones(2, 3), torch.ones(2, 3))


def test_matmul_gradient_random_3x4_4x2():
    a = torch.randn(3, 4, dtype=torch.float64)
    b = torch.randn(4, 2, dtype=torch.float64)
    w = torch.randn(3, 2, dtype=torch.float64)
    rep = grad_check(lambda x: (matmul(x[:12].reshape(3, 4), x[12:].reshape(4, 2)) * w).sum(), torch.cat([a.ravel(), b.ravel()]))
    assert rep.passed, rep.max_rel_err


def test_conv_identity_kernel():
    x = torch.randn(2, 5, 6, dtype=torch.float64)
    k = torch.zeros(2, 2, 1, 1, dtype=torch.float64)
    k[0, 0] = k[1, 1] = 1.0
    assert torch.equal(conv(x, k, 2), x)


def test_conv_zero_kernel_gives_zero():
    x = torch.randn(1, 3, 4, 4, 4)
    assert torch.count_nonzero(conv(x, torch.zeros(2, 3, 3, 3, 3), 3, padding=1)) == 0


def test_conv_averaging_kernel_on_constant_image():
    x = torch.full((1, 6, 7), 2.5, dtype=torch.float64)
    k = torch.full((1, 1, 3, 3), 1 / 9, dtype=torch.float64)
    out = conv(x, k, 2)
    assert out.shape == (1, 4, 5)
    assert torch.allclose(out, torch.full_like(out, 2.5), atol=1e-14)


def test_conv_shape_errors():
    with pytest.raises(ShapeMismatch):
        conv(torch.ones(1, 3, 4), torch.ones(1, 2, 3), 1)
    with pytest.raises(ShapeMismatch):
        conv(torch.ones(1, 2), torch.ones(1, 1, 3), 1)


def test_grad_check_closed_form():
    rep = grad_check(lambda x: (x**2).sum(), torch.tensor([1.0, 2.0], dtype=torch.float64), tol=1e-6)
    assert rep.passed
    np.testing.assert_allclose(rep.analytic, [2.0, 4.0])


def test_grad_check_constant_function():
    rep = grad_check(lambda x: torch.tensor(3.0, dtype=torch.float64), torch.randn(4, dtype=torch.float64))
    assert rep.max_rel_err == 0.0
    assert np.all(rep.analytic == 0)


def test_grad_check_detects_wrong_gradient():
    class Bad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x.clone()

        @staticmethod
        def backward(ctx, g):
            return 2 * g

    rep = grad_check(lambda x: Bad.apply(x).sum(), torch.randn(3, dtype=torch.float64))
    assert not rep.passed


shape_st = st.lists(st.sampled_from([1, 2, 3]), min_size=0, max_size=3)


def _try(*shapes):
    try:
        return broadcast_shape(*shapes)
    except ShapeMismatch:
        return None


@given(shape_st, shape_st, shape_st)
def test_broadcast_is_associative(s1, s2, s3):
    left = _try(s1, s2)
    right = _try(s2, s3)
    a = None if left is None else _try(left, s3)
    b = None if right is None else _try(s1, right)
    if a is not None and b is not None:
        assert a == b
    if a is not None:
        assert a == tuple(np.broadcast_shapes(tuple(s1), tuple(s2), tuple(s3)))


@given(st.integers(0, 2**31 - 1))
def test_adjoint_is_linear(seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(4, generator=g, dtype=torch.float64, requires_grad=True)
    f1 = lambda v: (elementwise("sigmoid", v) * 3).sum()  # noqa: E731
    f2 = lambda v: elementwise("exp", v).sum()  # noqa: E731
    (g_sum,) = torch.autograd.grad(f1(x) + f2(x), x)
    (g1,) = torch.autograd.grad(f1(x), x)
    (g2,) = torch.autograd.grad(f2(x), x)
    assert torch.allclose(g_sum, g1 + g2, rtol=0, atol=1e-14)


def test_streams_are_reproducible_and_independent():
    a = Streams(5)
    b = Streams(5)
    assert np.array_equal(a.numpy("x", 1).random(4), b.numpy("x", 1).random(4))
    assert not np.array_equal(a.numpy("x", 1).random(4), a.numpy("x", 2).random(4))
    assert torch.equal(a.normal((3,), "n"), b.normal((3,), "n"))
    assert a.int("init") == b.int("init") != Streams(6).int("init")
