import numpy as np
import pytest

from spotpatch.exceptions import ConfigurationError
from spotpatch.optim import SGD, Adam, make_optimizer
from spotpatch.tensor import Tensor


def param(values, grad):
    p = Tensor(np.array(values, np.float64), requires_grad=True)
    p.grad = np.array(grad, np.float64)
    return p


def test_sgd_momentum_two_steps():
    p = param([1.0, -2.0], [0.5, 1.0])
    opt = SGD({"w": [p]}, {"w": 0.1}, momentum=0.9)
    opt.step()
    assert np.allclose(p.data, [1.0 - 0.05, -2.0 - 0.1])
    opt.step()  # v = 0.9 * g + g
    assert np.allclose(p.data, [0.95 - 0.1 * 0.95, -2.1 - 0.1 * 1.9])


def test_sgd_weight_decay():
    p = param([2.0], [0.0])
    SGD({"w": [p]}, {"w": 0.5}, momentum=0.0, weight_decay={"w": 0.1}).step()
    assert np.allclose(p.data, [2.0 - 0.5 * 0.2])


def test_zero_lr_group_untouched():
    a, b = param([1.0], [1.0]), param([1.0], [1.0])
    opt = Adam({"a": [a], "b": [b]}, {"a": 0.1, "b": 0.0})
    opt.step()
    assert b.data[0] == 1.0 and a.data[0] != 1.0


def test_adam_first_step_is_lr_times_sign():
    p = param([0.0, 0.0, 0.0], [3.0, -0.01, 0.0])
    Adam({"w": [p]}, {"w": 0.2}).step()
    assert np.allclose(p.data, [-0.2, 0.2, 0.0], atol=1e-6)


def test_adam_matches_reference_recurrence():
    rng = np.random.default_rng(0)
    grads = rng.standard_normal((5, 3))
    p = param(np.zeros(3), grads[0])
    opt = Adam({"w": [p]}, {"w": 0.01})
    x, m, v = np.zeros(3), np.zeros(3), np.zeros(3)
    for t, g in enumerate(grads, 1):
        p.grad = g.copy()
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x -= 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert np.allclose(p.data, x, rtol=1e-12, atol=1e-15)


def test_missing_grad_skipped_and_zero_grad():
    p = param([1.0], [1.0])
    p.grad = None
    opt = make_optimizer("sgd", {"w": [p]}, {"w": 1.0})
    opt.step()
    assert p.data[0] == 1.0
    p.grad = np.ones(1)
    opt.zero_grad()
    assert p.grad is None


def test_unknown_optimizer():
    with pytest.raises(ConfigurationError):
        make_optimizer("rmsprop", {}, {})
