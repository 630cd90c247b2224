import numpy as np
import pytest

from l2rgnn import tape
from l2rgnn.tape import Tensor


def fd_grad(f, x, h=1e-6):
    """Central finite differences of a scalar function of one array."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gf[i] = (up - down) / (2 * h)
    return g


def check_op(build, *shapes, seed=0, tol=1e-6):
    """Gradcheck a tape expression against finite differences."""
    rng = np.random.default_rng(seed)
    leaves = [Tensor(rng.standard_normal(s)) for s in shapes]

    def value():
        return float(build(*leaves).data)

    tape.zero_grads(leaves)
    loss = build(*leaves)
    tape.backward(loss)
    for leaf in leaves:
        fd = fd_grad(lambda: value(), leaf.data)
        got = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        assert np.allclose(got, fd, atol=tol), f"{got} vs {fd}"


def test_add_mul_broadcast():
    check_op(lambda a, b: tape.sum_(tape.mul(tape.add(a, b), a)), (4, 3), (1, 3))
    check_op(lambda a, b: tape.sum_(tape.mul(a, b)), (5,), (5,))


def test_sub_div():
    check_op(lambda a, b: tape.sum_(tape.div(tape.sub(a, b), tape.add(tape.mul(b, b), 1.0))),
             (3, 2), (3, 2))


def test_matmul_2d():
    check_op(lambda a, b: tape.sum_(tape.matmul(a, b)), (4, 3), (3, 2))


def test_matmul_batched_and_broadcast():
    # stacked (B, n, n) @ (B, n, f) and (B, n, f) @ (f, h)
    check_op(lambda a, b: tape.sum_(tape.matmul(a, b)), (3, 4, 4), (3, 4, 2))
    check_op(lambda a, b: tape.sum_(tape.matmul(a, b)), (3, 4, 2), (2, 5))


def test_matmul_rejects_vectors():
    with pytest.raises(ValueError):
        tape.matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))


def test_transpose_reshape_concat():
    check_op(lambda a: tape.sum_(tape.mul(tape.transpose(a), 2.0)), (3, 5))
    check_op(lambda a: tape.sum_(tape.reshape(a, (6,))), (2, 3))
    check_op(lambda a, b: tape.sum_(tape.mul(tape.concat([a, b]), 1.5)), (2, 3), (4, 3))


def test_reductions():
    check_op(lambda a: tape.sum_(tape.mul(tape.sum_(a, axis=0), 3.0)), (4, 3))
    check_op(lambda a: tape.sum_(tape.mean_(a, axis=1, keepdims=True)), (4, 3))
    check_op(lambda a: tape.mean_(a), (7,))


def test_nonlinearities():
    check_op(lambda a: tape.sum_(tape.relu(a)), (4, 3), seed=3)
    check_op(lambda a: tape.sum_(tape.cos_(a)), (4, 3))
    check_op(lambda a: tape.sum_(tape.softplus(a)), (6,))
    check_op(lambda a: tape.sum_(tape.logsumexp(a, axis=1)), (5, 4))


def test_select_index_and_slice():
    idx = np.array([0, 2, 1])
    check_op(lambda a: tape.sum_(tape.select_index(a, idx)), (3, 3))
    check_op(lambda a: tape.sum_(tape.mul(tape.slice_cols(a, 1, 3), 2.0)), (4, 5))


def test_getitem():
    check_op(lambda a: tape.sum_(a[1:3]), (5, 2))


def test_softplus_stable_at_extremes():
    t = Tensor(np.array([-800.0, 0.0, 800.0]))
    out = tape.softplus(t)
    assert np.all(np.isfinite(out.data))
    assert out.data[0] == pytest.approx(0.0, abs=1e-12)
    assert out.data[2] == pytest.approx(800.0)


def test_constants_break_gradient_flow():
    x = Tensor(np.ones(3))
    c = tape.constant(np.ones(3) * 2.0)
    loss = tape.sum_(tape.mul(x, c))
    tape.backward(loss)
    assert np.allclose(x.grad, 2.0)
    assert c.grad is None

    detached = tape.stop_grad(tape.mul(x, 3.0))
    assert not detached.requires_grad


def test_grad_accumulates_on_reuse():
    # y = x * x has gradient 2x when the same tensor feeds both slots
    x = Tensor(np.array([1.5, -2.0]))
    loss = tape.sum_(tape.mul(x, x))
    tape.backward(loss)
    assert np.allclose(x.grad, 2 * x.data)


def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2)))
    with pytest.raises(ValueError):
        tape.backward(tape.mul(x, 2.0))


def test_deep_chain_is_iterative():
    # long chains must not hit the recursion limit
    x = Tensor(np.array(1.0))
    y = x
    for _ in range(5000):
        y = tape.add(y, 1.0)
    loss = tape.mul(y, 1.0)
    tape.backward(loss)
    assert x.grad == pytest.approx(1.0)
