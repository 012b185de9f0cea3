import numpy as np
import pytest

from slsdeep import ops
from slsdeep.tensor import Tape, Tensor, active_tape


def test_tensor_basics():
    t = Tensor(np.arange(6.0).reshape(1, 1, 2, 3), requires_grad=True, name="t")
    assert t.shape == (1, 1, 2, 3)
    assert t.size == 6 and t.ndim == 4
    assert t.is_leaf and t.grad is None


def test_backward_accumulates_into_leaves():
    a = Tensor(np.full((1, 1, 2, 2), 2.0), requires_grad=True)
    b = Tensor(np.full((1, 1, 2, 2), 3.0), requires_grad=True)
    with Tape() as tape:
        # a*b + a: d/da = b + 1, d/db = a
        out = ops.sum(ops.add(ops.mul(a, b), a))
    tape.backward(out)
    np.testing.assert_array_equal(a.grad, np.full((1, 1, 2, 2), 4.0))
    np.testing.assert_array_equal(b.grad, np.full((1, 1, 2, 2), 2.0))


def test_backward_visits_each_op_once():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    with Tape() as tape:
        y = ops.relu(x)
        z = ops.mul(y, y)
        out = ops.sum(z)
    assert len(tape) == 3
    assert tape.backward(out) == 3
    np.testing.assert_array_equal(x.grad, 2 * np.ones((1, 1, 2, 2)))


def test_no_recording_without_tape_or_grad():
    x = Tensor(np.ones((1, 1, 2, 2)))
    assert active_tape() is None
    with Tape() as tape:
        ops.relu(x)
        assert active_tape() is tape
    assert len(tape) == 0


def test_backward_requires_scalar_or_seed():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    with Tape() as tape:
        y = ops.relu(x)
    with pytest.raises(ValueError):
        tape.backward(y)
    tape.backward(y, np.full(y.shape, 2.0))
    np.testing.assert_array_equal(x.grad, np.full((1, 1, 2, 2), 2.0))


def test_linear_function_gradient_is_exact():
    c = np.random.default_rng(0).standard_normal((2, 3, 4, 4))
    x = Tensor(np.random.default_rng(1).standard_normal((2, 3, 4, 4)), requires_grad=True)
    with Tape() as tape:
        out = ops.sum(ops.mul(x, c))
    tape.backward(out)
    np.testing.assert_array_equal(x.grad, c)
