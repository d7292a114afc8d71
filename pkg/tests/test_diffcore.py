import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modmbrl import diffcore as dc
from modmbrl.diffcore import checkpoint
from modmbrl.diffcore.gradsuite import check_op, op_cases
from modmbrl.diffcore.tensor import ShapeError


def _conv_direct(x, w, b, stride):
    n, cin, length = x.shape
    cout, _, k = w.shape
    lout = (length - k) // stride + 1
    out = np.zeros((n, cout, lout))
    for i in range(n):
        for o in range(cout):
            for t in range(lout):
                acc = b[o]
                for c in range(cin):
                    for j in range(k):
                        acc += x[i, c, t * stride + j] * w[o, c, j]
                out[i, o, t] = acc
    return out


def test_matmul_identity():
    a = dc.Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = dc.matmul(a, dc.Tensor(np.eye(2)))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_matches_loops():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    ref = [[sum(a[i, k] * b[k, j] for k in range(4)) for j in range(2)] for i in range(3)]
    np.testing.assert_allclose(dc.matmul(dc.Tensor(a), dc.Tensor(b)).data, ref, atol=1e-12)


def test_conv_ones_window():
    x = dc.Tensor(np.ones((1, 1, 21)))
    w = dc.Tensor(np.ones((1, 1, 3)))
    out = dc.conv1d(x, w, stride=1)
    assert out.shape == (1, 1, 19)
    np.testing.assert_array_equal(out.data.ravel(), np.full(19, 3.0))


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_matches_direct_summation(stride):
    rng = np.random.default_rng(2)
    x, w, b = rng.normal(size=(2, 3, 21)), rng.normal(size=(4, 3, 5)), rng.normal(size=4)
    got = dc.conv1d(dc.Tensor(x), dc.Tensor(w), dc.Tensor(b), stride=stride).data
    np.testing.assert_allclose(got, _conv_direct(x, w, b, stride), atol=1e-12)


def test_scalar_reference_unary():
    v = [-1.3, 0.2, 2.0]
    x = dc.Tensor(v)
    np.testing.assert_allclose(dc.tanh(x).data, [math.tanh(a) for a in v], atol=1e-12)
    np.testing.assert_allclose(dc.softplus(x).data, [math.log1p(math.exp(a)) for a in v], atol=1e-12)
    np.testing.assert_allclose(dc.sigmoid(x).data, [1 / (1 + math.exp(-a)) for a in v], atol=1e-12)
    np.testing.assert_allclose(dc.relu(x).data, [max(a, 0) for a in v], atol=0)


def test_shape_error_names_op():
    with pytest.raises(ShapeError, match="matmul"):
        dc.matmul(dc.Tensor(np.ones((2, 3))), dc.Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="add.*\\(2, 3\\).*\\(4,\\)"):
        dc.add(dc.Tensor(np.ones((2, 3))), dc.Tensor(np.ones(4)))


def test_nonfinite_rejected_at_creation():
    with pytest.raises(dc.NonFiniteError):
        dc.Tensor([1.0, np.nan])


def test_backward_square():
    store = dc.ParamStore()
    x = store.add("x", [3.0])
    with dc.Tape():
        loss = dc.tsum(dc.mul(x, x))
        g = dc.backward(loss, store)
    np.testing.assert_array_equal(g["x"], [6.0])


def test_disconnected_leaf_zero_grad():
    store = dc.ParamStore()
    x = store.add("x", [1.0, 2.0])
    store.add("w", np.ones((2, 2)))
    with dc.Tape():
        g = dc.backward(dc.tsum(dc.tanh(x)), store)
    np.testing.assert_array_equal(g["w"], np.zeros((2, 2)))


def test_detach_blocks_gradient():
    store = dc.ParamStore()
    x = store.add("x", [0.5, -0.2])
    with dc.Tape():
        y = dc.detach(dc.mul(x, 3.0))
        loss = dc.tsum(dc.mul(y, y))
        # loss is built only from constants: not on the tape
        assert loss.node_id is None
        z = dc.add(dc.mul(dc.detach(x), 2.0), dc.tsum(x) * 0.0)
        g = dc.backward(dc.tsum(z), store)
    np.testing.assert_array_equal(g["x"], [0.0, 0.0])


def test_backward_errors():
    with pytest.raises(ValueError):
        dc.backward(dc.Tensor(1.0))
    store = dc.ParamStore()
    x = store.add("x", [1.0, 2.0])
    with dc.Tape():
        with pytest.raises(ShapeError):
            dc.backward(dc.mul(x, 2.0), store)


def test_three_layer_tanh_net_grad():
    rng = np.random.default_rng(0)
    store = dc.ParamStore()
    sizes = [5, 7, 6, 1]
    for i in range(3):
        store.add(f"W{i}", rng.normal(size=(sizes[i], sizes[i + 1])) * 0.7)
        store.add(f"b{i}", rng.normal(size=sizes[i + 1]) * 0.1)
    xin = dc.Tensor(rng.normal(size=(4, 5)))

    def loss():
        h = xin
        for i in range(3):
            h = dc.tanh(dc.linear(h, store[f"W{i}"], store[f"b{i}"]))
        return dc.tsum(dc.square(h))

    assert dc.grad_check_store(loss, store, eps=1e-5) < 1e-5


@pytest.mark.parametrize("op", sorted(op_cases()))
def test_every_op_gradcheck_random_points(op):
    assert check_op(op, points=10, eps=1e-5) < 1e-5


def test_gradcheck_sum_linear():
    x = np.random.default_rng(3).normal(size=(3, 2))
    assert dc.grad_check(lambda t: dc.tsum(t), x) < 1e-10


def test_gradcheck_rejects_nonfinite():
    with pytest.raises(dc.NonFiniteError):
        dc.grad_check(lambda t: dc.tsum(dc.log(t)), np.array([1e-6]), eps=1e-5)


def test_sample_with_zero_noise_is_mean():
    mu = np.array([0.3, -1.7, 4.0])
    out = dc.gaussian_sample(dc.Tensor(mu), dc.Tensor([1.5, -8.0, 2.0]), dc.Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, mu)


def test_tape_replay_deterministic():
    def run():
        rng = np.random.default_rng(11)
        store = dc.ParamStore()
        w = store.add("w", rng.normal(size=(3, 3)))
        x = dc.Tensor(rng.normal(size=(5, 3)))
        with dc.Tape():
            y = dc.tsum(dc.tanh(dc.matmul(dc.tanh(dc.matmul(x, w)), w)))
            g = dc.backward(y, store)
        return y.data.copy(), g["w"]

    (y1, g1), (y2, g2) = run(), run()
    assert y1.tobytes() == y2.tobytes()
    assert g1.tobytes() == g2.tobytes()


def test_sgd_plain_step():
    store = dc.ParamStore()
    store.add("w", [1.0])
    dc.sgd_step(store, {"w": np.array([2.0])}, lr=0.1)
    assert store["w"].data[0] == pytest.approx(0.8, abs=1e-15)


def test_sgd_zero_lr_unchanged():
    store = dc.ParamStore()
    store.add("w", [1.0, -2.0])
    before = store.state()
    dc.sgd_step(store, {"w": np.array([5.0, 5.0])}, lr=0.0, momentum=0.9)
    np.testing.assert_array_equal(store["w"].data, before["w"])


def test_sgd_missing_key():
    store = dc.ParamStore()
    store.add("w", [1.0])
    with pytest.raises(KeyError):
        dc.sgd_step(store, {}, lr=0.1)


def test_snapshot_restore_bit_exact():
    rng = np.random.default_rng(4)
    store = dc.ParamStore()
    store.add("a", rng.normal(size=(3, 2)))
    store.add("b", rng.normal(size=5))
    store.snapshot()
    ref = {k: v.tobytes() for k, v in store.state().items()}
    for _ in range(3):
        dc.sgd_step(store, {k: rng.normal(size=t.shape) for k, t in store.items()}, lr=0.3, momentum=0.9)
    store.restore()
    assert {k: v.tobytes() for k, v in store.state().items()} == ref
    assert store.momentum == {}


def test_duplicate_param_name():
    store = dc.ParamStore()
    store.add("a", [1.0])
    with pytest.raises(KeyError):
        store.add("a", [2.0])


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=6))
def test_sum_of_squares_gradient_property(vals):
    x = np.array(vals)
    store = dc.ParamStore()
    t = store.add("x", x)
    with dc.Tape():
        g = dc.backward(dc.tsum(dc.square(t)), store)["x"]
    np.testing.assert_allclose(g, 2 * x, rtol=0, atol=1e-12)


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"policy/a": rng.normal(size=(2, 3)), "model/b": rng.normal(size=4), "s": np.array(1.5)}
    path = tmp_path / "x.mmck"
    digest = checkpoint.save(path, tensors)
    back = checkpoint.load(path)
    assert set(back) == set(tensors)
    for k in tensors:
        assert back[k].tobytes() == np.asarray(tensors[k], dtype="<f8").tobytes()
    assert checkpoint.file_checksum(path) == digest


def test_checkpoint_detects_corruption(tmp_path):
    path = tmp_path / "x.mmck"
    checkpoint.save(path, {"w": np.arange(4.0)})
    blob = bytearray(path.read_bytes())
    blob[-1] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(checkpoint.CheckpointError, match="checksum"):
        checkpoint.load(path)
