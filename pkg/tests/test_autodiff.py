import numpy as np
import pytest

from equilopo import autodiff as ad
from equilopo.autodiff import Adam, Parameter, TapeError, Tensor
from equilopo.gradcheck import REGISTRY, grad_check
from equilopo.signal import degree_weights


@pytest.mark.parametrize("op", sorted(REGISTRY))
def test_grad_check_every_op(op):
    report = grad_check(op)
    assert report.passed, report.to_dict()


def test_grad_check_identity_error_is_rounding_only():
    # central differences of a linear map differ from the exact slope by rounding alone
    assert grad_check("identity").max_error <= 1e-10


def test_grad_check_unknown_op():
    with pytest.raises(KeyError):
        grad_check("fft")


def test_l2_squared_gradient_closed_form():
    rng = np.random.default_rng(0)
    f = Tensor(rng.standard_normal(35), requires_grad=True)
    w = np.asarray(degree_weights(2))
    ad.tsum(f * f * w).backward()
    np.testing.assert_allclose(f.grad, 2 * f.data * w, atol=1e-15)


def test_fan_out_accumulates():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    y = x * x + 3.0 * x
    ad.tsum(y).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 3.0)


def test_shared_subexpression_visited_once():
    x = Tensor(np.array(2.0), requires_grad=True)
    a = ad.exp(x)
    b = a * a + a
    b.backward()
    e = np.exp(2.0)
    assert x.grad == pytest.approx(2 * e * e + e, rel=1e-14)


def test_backward_errors():
    with pytest.raises(TapeError):
        Tensor(np.ones(2)).backward()
    x = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(TapeError):
        (x * 2.0).backward()


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad
    assert ad.grad_enabled()


def test_broadcast_gradients_reduce_to_input_shape():
    a = Tensor(np.ones((4, 3)), requires_grad=True)
    b = Tensor(np.arange(3.0), requires_grad=True)
    ad.tsum(a * b).backward()
    assert b.grad.shape == (3,)
    np.testing.assert_allclose(b.grad, 4.0)
    np.testing.assert_allclose(a.grad, np.broadcast_to(np.arange(3.0), (4, 3)))


def test_cross_entropy_value():
    logits = Tensor(np.array([[2.0, 0.0, -1.0], [0.0, 0.0, 0.0]]))
    labels = np.array([0, 2])
    p0 = np.exp(2.0) / (np.exp(2.0) + 1 + np.exp(-1.0))
    expect = -(np.log(p0) + np.log(1 / 3)) / 2
    assert ad.cross_entropy(logits, labels).item() == pytest.approx(expect, rel=1e-14)


def test_adam_first_step_moves_by_lr():
    p = Parameter(np.array([1.0, -1.0]))
    p.grad = np.array([0.3, -5.0])
    opt = Adam([p], lr=0.01)
    opt.step()
    # bias-corrected first step is lr * sign(g)
    np.testing.assert_allclose(p.data, [0.99, -0.99], atol=1e-8)


def test_adam_deterministic_and_zero_lr():
    def run(lr):
        rng = np.random.default_rng(1)
        p = Parameter(rng.standard_normal(5))
        opt = Adam([p], lr=lr)
        for _ in range(10):
            opt.zero_grad()
            ad.tsum(p * p * p).backward()
            opt.step()
        return p.data

    np.testing.assert_array_equal(run(0.01), run(0.01))
    np.testing.assert_array_equal(run(0.0), np.random.default_rng(1).standard_normal(5))
    with pytest.raises(ValueError):
        Adam([], lr=-1.0)


def test_adam_minimizes_quadratic():
    p = Parameter(np.array([3.0, -2.0]))
    opt = Adam([p], lr=0.1)
    for _ in range(300):
        opt.zero_grad()
        ad.tsum((p - 1.0) * (p - 1.0)).backward()
        opt.step()
    np.testing.assert_allclose(p.data, 1.0, atol=1e-2)
