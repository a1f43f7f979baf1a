import numpy as np
import pytest

from conftest import rand_param, worst
from msvmamba.errors import ContractViolation, ShapeError
from msvmamba.nn_ops import conv2d
from msvmamba.tensor import (Tensor, backward, build_tape, concat, exp, getitem, matmul,
                             no_grad, parameter, precision, relu, sigmoid, tsum)


def test_sum_gradient_is_ones():
    x = parameter(np.arange(4.0).reshape(2, 2))
    backward(tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 2)))


def test_square_gradient():
    x = parameter([1.0, 2.0, 3.0])
    backward(tsum(x * x))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_conv_gradient_f32(rng):
    x = rand_param(rng, 1, 1, 5, 5)
    w = rand_param(rng, 1, 1, 3, 3)
    assert worst(lambda: conv2d(x, w), {"x": x, "w": w}, max_probes=None) < 1e-3


def test_elementwise_values():
    assert sigmoid(Tensor([0.0])).item() == 0.5
    np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_exp_gradient(rng):
    x = rand_param(rng, 8)
    assert worst(lambda: exp(x), {"x": x}, max_probes=None) < 1e-3


def test_matmul_values(rng):
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matmul(Tensor(np.eye(2)), a).data, a.data)
    assert matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]
    p, q = rand_param(rng, 4, 5), rand_param(rng, 5, 3)
    assert worst(lambda: matmul(p, q), {"p": p, "q": q}, max_probes=None) < 1e-3


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_concat_shape_slice_and_grad(rng):
    a, b = rand_param(rng, 1, 2, 4, 4), rand_param(rng, 1, 3, 4, 4)
    c = concat([a, b], axis=1)
    assert c.shape == (1, 5, 4, 4)
    np.testing.assert_array_equal(c[:, :2].data, a.data)
    np.testing.assert_array_equal(c[:, 2:].data, b.data)
    backward(tsum(c))
    np.testing.assert_array_equal(a.grad, np.ones_like(a.data))
    np.testing.assert_array_equal(b.grad, np.ones_like(b.data))


def test_fan_out_doubles_gradient(rng):
    x = rand_param(rng, 3, 3)
    backward(tsum(exp(x)))
    once = x.grad.copy()
    x.grad = None
    backward(tsum(exp(x)) + tsum(exp(x)))
    np.testing.assert_array_equal(x.grad, 2 * once)


def test_tape_order_and_single_visit(rng):
    x = rand_param(rng, 2, 2)
    y = exp(x)
    z = y * y + y
    tape = build_tape(tsum(z))
    pos = {id(t): i for i, t in enumerate(tape)}
    assert len(pos) == len(tape)
    for t in tape:
        for p in t._parents:
            assert pos[id(p)] < pos[id(t)]


def test_backward_requires_scalar(rng):
    with pytest.raises(ContractViolation):
        backward(rand_param(rng, 2) * 2.0)


def test_rank_limit():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((1, 1, 1, 1, 1)))


def test_broadcast_restricted():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones(3))
    out = Tensor(np.ones((2, 3))) + Tensor(np.ones((1, 3)))
    assert out.shape == (2, 3)


def test_no_grad_records_nothing(rng):
    x = rand_param(rng, 2)
    with no_grad():
        y = exp(x)
    assert y._parents == ()


def test_determinism(rng):
    def run():
        r = np.random.default_rng(5)
        x = parameter(r.standard_normal((1, 2, 5, 5)))
        w = parameter(r.standard_normal((3, 2, 3, 3)))
        out = conv2d(x, w)
        backward(tsum(out * out))
        return out.data, x.grad, w.grad
    for a, b in zip(run(), run()):
        assert a.tobytes() == b.tobytes()


def test_precision_context():
    with precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_getitem_grad(rng):
    x = rand_param(rng, 2, 3, 4, 4)
    backward(tsum(getitem(x, (slice(None), slice(1, 2)))))
    expect = np.zeros((2, 3, 4, 4))
    expect[:, 1] = 1
    np.testing.assert_array_equal(x.grad, expect)


def test_debug_nan_check(monkeypatch):
    import msvmamba.tensor as T
    monkeypatch.setattr(T, "DEBUG", True)
    with pytest.raises((FloatingPointError, ContractViolation)):
        T.log(Tensor([-1.0]))
