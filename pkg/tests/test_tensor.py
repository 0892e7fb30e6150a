import numpy as np
import pytest

from agegender import ops
from agegender.tensor import (
    GradTape,
    Tensor,
    backward,
    debug_mode,
    no_grad,
    resolve_dtype,
    set_default_dtype,
)


def test_dims_match_data_length():
    t = Tensor(np.zeros((2, 3, 4)))
    assert t.dims == (2, 3, 4)
    assert np.prod(t.dims) == t.data.size
    assert t.data.flags.c_contiguous


def test_default_dtype_is_float32_and_switchable():
    assert Tensor([1.0, 2.0]).dtype == np.float32
    set_default_dtype("f64")
    try:
        assert Tensor([1.0]).dtype == np.float64
    finally:
        set_default_dtype("f32")
    assert resolve_dtype("f64") == np.float64
    with pytest.raises(ValueError):
        resolve_dtype("int32")


def test_sum_gradient_is_all_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
    assert x.grad.shape == x.dims


def test_independent_parameter_gets_no_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    p = Tensor([3.0], requires_grad=True)
    y = x * 2.0
    backward(y.sum())
    assert p.grad is None or np.all(p.grad == 0)


def test_repeated_backward_accumulates():
    x = Tensor([1.0, -2.0], requires_grad=True)
    backward((x * x).sum())
    backward((x * x).sum())
    np.testing.assert_allclose(x.grad, 2 * 2 * x.data)


def test_non_scalar_loss_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        backward(x * 2.0)


def test_shared_subexpression_gradients_add_up():
    x = Tensor([3.0], requires_grad=True)
    y = x * x
    z = y + y * x  # x^2 + x^3
    backward(z.sum())
    np.testing.assert_allclose(x.grad, [2 * 3 + 3 * 9])


def test_broadcast_gradient_is_reduced():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    backward((x + b).sum())
    np.testing.assert_array_equal(b.grad, [2, 2, 2])


def test_tape_is_topologically_ordered():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3)), requires_grad=True)
    w = Tensor(np.ones((3, 2)), requires_grad=True)
    h = ops.relu(ops.dense(x, w))
    loss = ops.cross_entropy(ops.concat([h, h * 2.0], axis=1), [0, 3])
    tape = GradTape(loss)
    position = {id(t): i for i, t in enumerate(tape.entries)}
    for i, t in enumerate(tape.entries):
        for inp in t.node.inputs:
            if inp.node is not None:
                assert position[id(inp)] < i
    assert tape.entries[-1] is loss


def test_every_reachable_leaf_gets_grad():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    w1 = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    w2 = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    loss = ops.cross_entropy(ops.dense(ops.sigmoid(ops.dense(a, w1)), w2), [1, 0])
    backward(loss)
    for t in (a, w1, w2):
        assert t.grad is not None and t.grad.shape == t.dims


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 3.0
    assert y.node is None and not y.requires_grad


def test_detach_cuts_graph():
    x = Tensor([2.0], requires_grad=True)
    y = (x * x).detach() * x
    backward(y.sum())
    np.testing.assert_allclose(x.grad, [4.0])


def test_debug_mode_catches_non_finite():
    x = Tensor(np.array([1.0, 3e38], dtype=np.float32))
    with np.errstate(over="ignore"):
        with debug_mode():
            with pytest.raises(FloatingPointError, match="mul"):
                x * 10.0
        assert np.isinf((x * 10.0).data).any()  # unchecked by default


def test_replay_is_bit_identical():
    def run():
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(2, 3, 6, 6)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
        y = ops.maxpool2d(ops.relu(ops.conv2d(x, w, pad=1)), 2)
        backward((y * y).sum())
        return y.data.copy(), x.grad.copy(), w.grad.copy()

    first, second = run(), run()
    for a, b in zip(first, second):
        assert a.tobytes() == b.tobytes()
