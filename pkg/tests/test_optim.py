import numpy as np
import pytest

from cptlab.core.optim import Optimizer, adam, sgd
from cptlab.core.tensor import Tensor
from cptlab.errors import ContractError


def test_sgd_single_step():
    p = Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([1.0])
    opt = sgd([p], lr=0.1)
    opt.step()
    assert p.data[0] == pytest.approx(0.9)
    assert opt.state.step_count == 1
    assert p.grad is not None  # zeroing is a separate call


@pytest.mark.parametrize("scale", [1e-3, 1.0, 1e3])
def test_adam_first_step_magnitude_is_lr(scale):
    p = Tensor(np.zeros(4), requires_grad=True)
    p.grad = np.full(4, scale)
    adam([p], lr=0.01).step()
    np.testing.assert_allclose(np.abs(p.data), 0.01, rtol=1e-4)


def _adam_reference(x0, grad_fn, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    x = x0.copy()
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g**2
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        x = x - lr * mhat / (np.sqrt(vhat) + eps)
    return x


def test_adam_ten_steps_match_reference_recurrence():
    a = np.array([3.0, 0.5, 1.0])
    c = np.array([1.0, -2.0, 0.25])
    x0 = np.array([0.0, 1.0, -1.0])
    grad = lambda x: 2 * a * (x - c)  # noqa: E731  quadratic sum(a * (x - c)^2)
    p = Tensor(x0.copy(), requires_grad=True)
    opt = adam([p], lr=0.05)
    for _ in range(10):
        loss = (Tensor(a) * (p - Tensor(c)) * (p - Tensor(c))).sum()
        opt.zero_grad()
        loss.backward()
        opt.step()
    ref = _adam_reference(x0, grad, 0.05, 10)
    assert np.max(np.abs(p.data - ref)) < 1e-6


def test_missing_gradient_is_contract_error():
    a = Tensor(np.ones(2), requires_grad=True, name="a")
    b = Tensor(np.ones(2), requires_grad=True, name="b")
    a.grad = np.ones(2)
    with pytest.raises(ContractError, match="b"):
        Optimizer([a, b], "adam").step()


def test_moment_buffers_exist_only_for_adam():
    p = Tensor(np.ones((2, 3)), requires_grad=True)
    assert Optimizer([p], "sgd").state.m == []
    st = Optimizer([p], "adam").state
    assert [m.shape for m in st.m] == [(2, 3)] and [v.shape for v in st.v] == [(2, 3)]


def test_unknown_kind():
    with pytest.raises(ContractError):
        Optimizer([], "rmsprop")
