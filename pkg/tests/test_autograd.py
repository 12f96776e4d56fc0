import numpy as np
import pytest

from conftest import fd_grad, max_rel_err
from maskfed import tensor as T
from maskfed.errors import GraphConsumedError
from maskfed.tensor import Graph, Tensor


def test_sum_of_squares_gradient():
    x = Tensor(np.array([1.0, 2.0]).reshape(1, 2), requires_grad=True)
    with Graph() as g:
        loss = T.sum_all(T.mul(x, x))
        T.backward(loss, g)
    np.testing.assert_allclose(x.grad, [[2.0, 4.0]])


def test_cross_entropy_matches_finite_differences():
    rng = np.random.default_rng(0)
    logits = Tensor(rng.normal(size=(4, 6)), requires_grad=True, dtype=np.float64)
    labels = rng.integers(0, 6, size=4)
    with Graph() as g:
        loss = T.cross_entropy(logits, labels)
        T.backward(loss, g)
    fd = fd_grad(lambda: T.cross_entropy(Tensor(logits.data, dtype=np.float64),
                                         labels).item(), logits.data)
    assert max_rel_err(logits.grad, fd) < 1e-4


def test_frozen_tensor_keeps_no_grad():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    w = Tensor(np.ones((2, 2)), requires_grad=False)
    with Graph() as g:
        loss = T.sum_all(T.matmul(x, w))
        T.backward(loss, g)
    assert x.grad is not None
    assert w.grad is None


def test_backward_twice_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    with Graph() as g:
        loss = T.sum_all(x)
    T.backward(loss, g)
    with pytest.raises(GraphConsumedError):
        T.backward(loss, g)


def test_non_participating_leaf_gets_zeros():
    x = Tensor(np.ones(3), requires_grad=True)
    y = Tensor(np.ones(3), requires_grad=True)
    with Graph() as g:
        T.mul(y, 2.0)  # on the tape but not feeding the loss
        loss = T.sum_all(x)
        T.backward(loss, g)
    np.testing.assert_array_equal(y.grad, np.zeros(3))
    np.testing.assert_array_equal(x.grad, np.ones(3))


def test_backward_overwrites_previous_grads():
    x = Tensor(np.ones(2), requires_grad=True)
    for _ in range(2):
        with Graph() as g:
            loss = T.sum_all(T.mul(x, x))
            T.backward(loss, g)
    np.testing.assert_allclose(x.grad, 2.0 * x.data)


def test_backward_adds_backward_macs_to_counter():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.ones((3, 4)), requires_grad=True)
    with Graph() as g:
        loss = T.sum_all(T.matmul(a, b))
    fwd = g.mac_counter
    T.backward(loss, g)
    assert fwd == 2 * 3 * 4
    assert g.mac_counter == fwd + 2 * (2 * 3 * 4)  # dA and dB each cost m*k*q


def test_frozen_weight_skips_backward_macs():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.ones((3, 4)), requires_grad=False)
    with Graph() as g:
        loss = T.sum_all(T.matmul(a, b))
    T.backward(loss, g)
    assert g.mac_counter == 2 * (2 * 3 * 4)  # forward + dA only


@pytest.mark.parametrize("op_name", [
    "matmul", "add_broadcast", "mul", "gelu", "softmax", "layer_norm",
    "gather", "take_token", "tile", "concat", "reshape_transpose",
])
def test_op_gradients_match_finite_differences(op_name):
    rng = np.random.default_rng(hash(op_name) % 2**32)
    proj = {}

    def scalarize(t):
        # fixed random projection to a scalar keeps gradients generic
        if "w" not in proj:
            proj["w"] = rng.normal(size=t.shape)
        return T.sum_all(T.mul(t, Tensor(proj["w"], dtype=np.float64)))

    def build(arrs):
        ts = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrs]
        return ts, lambda: _apply(op_name, ts)

    def _apply(name, ts):
        if name == "matmul":
            return scalarize(T.matmul(ts[0], ts[1]))
        if name == "add_broadcast":
            return scalarize(T.add(ts[0], ts[1]))
        if name == "mul":
            return scalarize(T.mul(ts[0], ts[1]))
        if name == "gelu":
            return scalarize(T.gelu(ts[0]))
        if name == "softmax":
            return scalarize(T.softmax_rows(ts[0]))
        if name == "layer_norm":
            return scalarize(T.layer_norm(ts[0], ts[1], ts[2], eps=1e-10))
        if name == "gather":
            return scalarize(T.gather_rows(ts[0], np.array([[0, 2], [2, 1]])))
        if name == "take_token":
            return scalarize(T.take_token(ts[0], 1))
        if name == "tile":
            return scalarize(T.tile_batch(ts[0], 3))
        if name == "concat":
            return scalarize(T.concat([ts[0], ts[1]], axis=1))
        raise AssertionError(name)

    if op_name == "matmul":
        arrs = [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]
    elif op_name in ("add_broadcast",):
        arrs = [rng.normal(size=(2, 3, 4)), rng.normal(size=(4,))]
    elif op_name == "mul":
        arrs = [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]
    elif op_name == "layer_norm":
        arrs = [rng.normal(size=(4, 6)), rng.normal(size=(6,)), rng.normal(size=(6,))]
    elif op_name == "gather":
        arrs = [rng.normal(size=(3, 5))]
    elif op_name == "take_token":
        arrs = [rng.normal(size=(2, 3, 4))]
    elif op_name == "tile":
        arrs = [rng.normal(size=(1, 4))]
    elif op_name == "concat":
        arrs = [rng.normal(size=(2, 2, 3)), rng.normal(size=(2, 1, 3))]
    elif op_name == "reshape_transpose":
        arrs = [rng.normal(size=(2, 3, 4))]
    else:
        arrs = [rng.normal(size=(5, 7))]

    if op_name == "reshape_transpose":
        ts = [Tensor(arrs[0], requires_grad=True, dtype=np.float64)]

        def forward():
            y = T.transpose(T.reshape(ts[0], (6, 4)), (1, 0))
            return scalarize(y)

        with Graph() as g:
            T.backward(forward(), g)
        fd = fd_grad(lambda: _fresh(op_name, arrs, proj), arrs[0])
        assert max_rel_err(ts[0].grad, fd) < 1e-4
        return

    ts, forward = build(arrs)
    with Graph() as g:
        T.backward(forward(), g)
    for i, t in enumerate(ts):
        fd = fd_grad(lambda: _fresh(op_name, arrs, proj), arrs[i])
        assert max_rel_err(t.grad, fd) < 1e-4, f"{op_name} input {i}"


def _fresh(name, arrs, proj):
    ts = [Tensor(a, dtype=np.float64) for a in arrs]
    w = Tensor(proj["w"], dtype=np.float64)
    if name == "matmul":
        out = T.matmul(ts[0], ts[1])
    elif name == "add_broadcast":
        out = T.add(ts[0], ts[1])
    elif name == "mul":
        out = T.mul(ts[0], ts[1])
    elif name == "gelu":
        out = T.gelu(ts[0])
    elif name == "softmax":
        out = T.softmax_rows(ts[0])
    elif name == "layer_norm":
        out = T.layer_norm(ts[0], ts[1], ts[2], eps=1e-10)
    elif name == "gather":
        out = T.gather_rows(ts[0], np.array([[0, 2], [2, 1]]))
    elif name == "take_token":
        out = T.take_token(ts[0], 1)
    elif name == "tile":
        out = T.tile_batch(ts[0], 3)
    elif name == "concat":
        out = T.concat([ts[0], ts[1]], axis=1)
    elif name == "reshape_transpose":
        out = T.transpose(T.reshape(ts[0], (6, 4)), (1, 0))
    else:
        raise AssertionError(name)
    return T.sum_all(T.mul(out, w)).item()
