import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sslab import autodiff as ad

from conftest import grad_close, numeric_grad, reverse_grad

TRIALS = 100


def test_add_example():
    np.testing.assert_array_equal(ad.add([1.0, 2.0], [3.0, 4.0]).data, [4.0, 6.0])


def test_softmax_example():
    np.testing.assert_array_equal(ad.softmax([0.0, 0.0]).data, [0.5, 0.5])


def test_matmul_identity():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.matmul(np.eye(2), m).data, m)


def test_stop_gradient_frozen_factor():
    # d/dx (x * sg(x)) = sg(x) = 3
    g = reverse_grad(lambda x: (x * ad.stop_gradient(x)).sum(), np.array(3.0))
    assert g == 3.0


def test_stop_gradient_blocks_path():
    with ad.Tape() as tape:
        x = ad.Tensor(5.0, requires_grad=True)
        y = ad.stop_gradient(x * x)
        loss = y + ad.Tensor(0.0, requires_grad=True)
    assert tape.backward(loss)[x.node_id] == 0.0


def test_stop_gradient_value_passthrough():
    np.testing.assert_array_equal(ad.stop_gradient([1.0, 2.0, 3.0]).data, [1.0, 2.0, 3.0])


def test_backward_sum():
    np.testing.assert_array_equal(reverse_grad(lambda x: x.sum(), np.zeros(3)), [1.0, 1.0, 1.0])


def test_backward_mean_square():
    np.testing.assert_allclose(reverse_grad(lambda x: (x * x).mean(), np.array([1.0, 2.0])), [1.0, 2.0])


def test_backward_rejects_non_scalar():
    with ad.Tape() as tape:
        x = ad.Tensor([1.0, 2.0], requires_grad=True)
        y = x * 2.0
    with pytest.raises(ad.ShapeError):
        tape.backward(y)


def test_unreached_leaf_gets_zeros():
    with ad.Tape() as tape:
        a = ad.Tensor([1.0, 2.0], requires_grad=True)
        b = ad.Tensor([3.0], requires_grad=True)
        _unused = b * 2.0
        loss = a.sum()
    g = tape.backward(loss)
    np.testing.assert_array_equal(g[b.node_id], [0.0])


def test_shape_error_names_op_and_shapes():
    with pytest.raises(ad.ShapeError) as err:
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))
    assert "matmul" in str(err.value) and "(2, 3)" in str(err.value)
    with pytest.raises(ad.ShapeError):
        ad.add(np.ones(3), np.ones(4))
    with pytest.raises(ad.ShapeError):
        ad.sum(np.ones(3), axis=1)


def test_no_grad_records_nothing():
    tape = ad.Tape()
    with tape:
        x = ad.Tensor(np.ones(4), requires_grad=True)
        with ad.no_grad():
            y = ad.softmax(x * 3.0)
    assert len(tape) == 0 and not y.requires_grad


def test_constants_are_not_recorded():
    tape = ad.Tape()
    with tape:
        ad.add(np.ones(2), np.ones(2))
    assert len(tape) == 0


def test_tape_is_topological_and_replayable(rng):
    w = rng.normal(size=(3, 2))
    with ad.Tape() as tape:
        x = ad.Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        loss = ad.softmax(ad.relu(x) @ w).mean()
    outputs = {e.output for e in tape.entries}
    produced = set()
    for e in tape.entries:
        assert all(nid in produced for nid in e.inputs if nid in outputs)
        produced.add(e.output)
    g1 = tape.backward(loss)[x.node_id]
    g2 = tape.backward(loss)[x.node_id]
    np.testing.assert_array_equal(g1, g2)


# ---------------------------------------------------------------------------
# gradient check for every op kind


def _away_from(x, point, gap=1e-3):
    return np.where(np.abs(x - point) < gap, point + gap * np.sign(x - point + 1e-30) * 2, x)


def _case(kind, rng):
    """(function of one tensor, sample input) exercising ``kind``; inputs in [-2, 2]."""
    u = lambda *s: rng.uniform(-2, 2, size=s)  # noqa: E731
    w = rng.normal(size=(4,))
    if kind == "add":
        c = u(2, 3)
        return lambda t: ((t + c) * (t + c)).sum(), u(2, 3)
    if kind == "sub":
        c = u(3)
        return lambda t: ((c - t) * (c - t)).sum(), u(2, 3)
    if kind == "mul":
        c = u(2, 3)
        return lambda t: (t * t * c).sum(), u(2, 3)
    if kind == "div":
        d = rng.uniform(0.5, 2, size=(2, 3))
        return lambda t: (t / (t * t + d)).sum() + (d / (t * t + 1.0)).sum(), u(2, 3)
    if kind == "matmul":
        m = u(3, 2)
        return lambda t: ((t @ m) * (t @ m)).sum(), u(2, 3)
    if kind == "conv3x3":
        k = u(3, 3, 2, 2)
        img = u(1, 3, 4, 2)
        if rng.random() < 0.5:
            return lambda t: (ad.conv3x3(t, k) * ad.conv3x3(t, k)).sum(), img
        return lambda t: (ad.conv3x3(img, t) * ad.conv3x3(img, t)).sum(), k
    if kind == "relu":
        c = u(2, 3)
        return lambda t: (ad.relu(t) * c).sum(), _away_from(u(2, 3), 0.0)
    if kind == "exp":
        return lambda t: (ad.exp(t) * w[:3]).sum(), u(3)
    if kind == "log":
        return lambda t: (ad.log(t) * w[:3]).sum(), rng.uniform(0.2, 2, size=3)
    if kind == "softmax":
        c = u(2, 4)
        return lambda t: (ad.softmax(t) * c).sum(), u(2, 4)
    if kind == "log_softmax":
        c = u(2, 4)
        return lambda t: (ad.log_softmax(t) * c).sum(), u(2, 4)
    if kind == "sum":
        c = u(3)
        return lambda t: (ad.sum(t, axis=0) * ad.sum(t, axis=0) * c).sum(), u(2, 3)
    if kind == "mean":
        return lambda t: (ad.mean(t * t, axis=(0, 2), keepdims=True) * 3.0).sum(), u(2, 3, 2)
    if kind == "reshape":
        c = u(3, 2)
        return lambda t: (ad.reshape(t, (3, 2)) * ad.reshape(t, (3, 2)) * c).sum(), u(2, 3)
    if kind == "slice":
        return lambda t: (t[1:, ::2] * t[1:, ::2]).sum() + t[0, 1] * 2.0, u(3, 4)
    if kind == "concat":
        c = u(3, 3)
        return lambda t: (ad.concat([t, t * t, t], axis=0) * c).sum(), u(1, 3)
    if kind == "maximum":
        c = u(5)
        return lambda t: (ad.maximum(t, 0.3) * c).sum(), _away_from(u(5), 0.3)
    if kind == "resample":
        idx = rng.integers(0, 4, size=(4, 5))
        wts = rng.uniform(0, 1, size=(4, 5))
        return lambda t: (ad.resample(t, idx, wts) * ad.resample(t, idx, wts)).sum(), u(4, 2)
    raise KeyError(kind)


@pytest.mark.parametrize("kind", sorted(ad.OPS))
def test_gradient_check_every_op(kind):
    rng = np.random.default_rng(zlib.crc32(kind.encode()))
    for _ in range(TRIALS):
        f, x = _case(kind, rng)
        analytic = reverse_grad(f, x)
        numeric = numeric_grad(lambda v: float(f(ad.Tensor(v)).data), x)
        assert grad_close(analytic, numeric), (kind, analytic, numeric)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-50, 50)))
def test_stop_gradient_is_value_neutral(x):
    a = ad.softmax(x * 2.0).data
    b = ad.softmax(ad.stop_gradient(ad.Tensor(x)) * 2.0).data
    assert a.tobytes() == b.tobytes()


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 6)), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    np.testing.assert_allclose(ad.softmax(x).data.sum(axis=-1), 1.0, atol=1e-9)


def test_determinism(rng):
    x = rng.normal(size=(5, 4))
    w = rng.normal(size=(4, 3))

    def run():
        with ad.Tape() as tape:
            t = ad.Tensor(x, requires_grad=True)
            loss = ad.log_softmax(t @ w).mean()
        return loss.data.tobytes(), tape.backward(loss)[t.node_id].tobytes()

    assert run() == run()
