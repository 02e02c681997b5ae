import math
import struct

import numpy as np
import pytest

from sslab import autodiff as ad
from sslab.models import (
    AdamState,
    BatchNormLite,
    CheckpointError,
    Mlp,
    Mode,
    PixelLinear,
    TinyFcn,
    adam_step,
    as_leaves,
    forward,
    load_checkpoint,
    lr_schedule,
    save_checkpoint,
)

from conftest import grad_close, numeric_grad


def test_mlp_outputs_distributions(rng):
    model = Mlp()
    p = forward(model, model.init_params(rng), rng.normal(size=(7, 2)))
    assert p.shape == (7, 2)
    np.testing.assert_allclose(p.data.sum(-1), 1.0, atol=1e-12)


def test_tiny_fcn_shapes_and_simplex(rng):
    model = TinyFcn()
    params = model.init_params(rng)
    p = forward(model, params, rng.uniform(size=(2, 16, 12, 3)), Mode.TRAIN_CLEAN, model.init_buffers())
    assert p.shape == (2, 16, 12, 5)
    np.testing.assert_allclose(p.data.sum(-1), 1.0, atol=1e-9)


def test_shape_errors(rng):
    with pytest.raises(ad.ShapeError):
        forward(Mlp(), Mlp().init_params(rng), np.zeros((3, 4)))
    with pytest.raises(ad.ShapeError):
        forward(TinyFcn(), TinyFcn().init_params(rng), np.zeros((1, 8, 8, 4)), Mode.EVAL, TinyFcn().init_buffers())


def test_init_bounds_and_determinism():
    a = Mlp().init_params(np.random.default_rng(1))
    b = Mlp().init_params(np.random.default_rng(1))
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()
    assert np.max(np.abs(a["fc1.weight"])) <= math.sqrt(1 / 100)
    assert not np.any(a["fc0.bias"])


def test_pixel_linear_is_pointwise(rng):
    model = PixelLinear()
    params = model.init_params(rng)
    x = rng.uniform(size=(1, 5, 5, 3))
    full = forward(model, params, x).data
    single = forward(model, params, x[:, 2:3, 4:5]).data
    np.testing.assert_array_equal(full[:, 2:3, 4:5], single)


# ---------------------------------------------------------------------------
# batch norm modes


def test_batchnorm_train_clean_normalizes_and_updates(rng):
    bn = BatchNormLite(3)
    params = as_leaves(bn.init_params("bn"), requires_grad=False)
    buffers = bn.init_buffers("bn")
    x = rng.normal(2.0, 3.0, size=(4, 5, 5, 3))
    out = bn(ad.Tensor(x), params, buffers, "bn", Mode.TRAIN_CLEAN).data
    np.testing.assert_allclose(out.mean(axis=(0, 1, 2)), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=(0, 1, 2)), 1.0, atol=1e-4)
    np.testing.assert_allclose(buffers["bn.mean"], 0.1 * x.mean(axis=(0, 1, 2)))


@pytest.mark.parametrize("mode", [Mode.TRAIN_FROZEN, Mode.EVAL])
def test_batchnorm_frozen_modes_leave_statistics(rng, mode):
    bn = BatchNormLite(2)
    params = as_leaves(bn.init_params("bn"), requires_grad=False)
    buffers = {"bn.mean": np.array([1.0, -1.0]), "bn.var": np.array([4.0, 0.25])}
    before = {k: v.copy() for k, v in buffers.items()}
    x = rng.normal(size=(3, 2))
    out = bn(ad.Tensor(x), params, buffers, "bn", mode).data
    np.testing.assert_allclose(out, (x - before["bn.mean"]) / np.sqrt(before["bn.var"] + 1e-5))
    for k in buffers:
        assert buffers[k].tobytes() == before[k].tobytes()


def test_batchnorm_gradient(rng):
    bn = BatchNormLite(2)
    params = as_leaves(bn.init_params("bn"), requires_grad=False)
    c = rng.normal(size=(6, 2))

    def f(t):
        return (bn(t, params, bn.init_buffers("bn"), "bn", Mode.TRAIN_CLEAN) * c).sum() * 1.0

    x = rng.normal(size=(6, 2))
    with ad.Tape() as tape:
        t = ad.Tensor(x, requires_grad=True)
        loss = f(t)
    analytic = tape.backward(loss)[t.node_id]
    numeric = numeric_grad(lambda v: float(f(ad.Tensor(v)).data), x)
    assert grad_close(analytic, numeric)


# ---------------------------------------------------------------------------
# optimizer and schedule


def test_adam_first_step_moves_by_lr():
    params = {"w": np.array([1.0, -2.0])}
    out = adam_step(params, {"w": np.array([0.5, -3.0])}, AdamState(), lr=0.1)
    np.testing.assert_allclose(out["w"], [0.9, -1.9], atol=1e-7)


def test_adam_matches_reference_recurrence(rng):
    p = rng.normal(size=3)
    state = AdamState()
    params = {"w": p.copy()}
    m = v = np.zeros(3)
    ref = p.copy()
    for t in range(1, 6):
        g = rng.normal(size=3)
        params = adam_step(params, {"w": g}, state, lr=0.01, weight_decay=0.1)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        step = 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        ref = ref - step - 0.01 * 0.1 * ref
    np.testing.assert_allclose(params["w"], ref, rtol=1e-12)


def test_adam_errors():
    with pytest.raises(ValueError):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(2)}, AdamState(), lr=0.0)
    with pytest.raises(ValueError):
        adam_step({"w": np.zeros(2)}, {"v": np.zeros(2)}, AdamState(), lr=0.1)


def test_lr_schedule():
    assert lr_schedule(0.0, 0.4) == 0.4
    assert abs(lr_schedule(0.5, 1.0) - math.cos(math.pi / 4)) < 1e-15
    assert abs(lr_schedule(1.0, 1.0)) < 1e-15
    with pytest.raises(ValueError):
        lr_schedule(1.5, 1.0)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(tmp_path, rng):
    params = TinyFcn().init_params(rng)
    params["scalar"] = np.array(3.5)
    path = tmp_path / "ckpt.bin"
    save_checkpoint(path, params)
    back = load_checkpoint(path)
    assert list(back) == list(params)
    for k in params:
        assert back[k].shape == params[k].shape
        assert back[k].tobytes() == params[k].tobytes()


def test_checkpoint_layout(tmp_path):
    path = tmp_path / "c.bin"
    save_checkpoint(path, {"ab": np.array([[1.0, 2.0]])})
    raw = path.read_bytes()
    expect = b"SSLAB1" + struct.pack("<I", 1) + struct.pack("<I", 2) + b"ab"
    expect += struct.pack("<IQQ", 2, 1, 2) + struct.pack("<2d", 1.0, 2.0)
    assert raw == expect


@pytest.mark.parametrize("mutate", [lambda b: b"XXXXX1" + b[6:], lambda b: b[:-3], lambda b: b + b"\0"])
def test_checkpoint_corruption(tmp_path, mutate):
    path = tmp_path / "c.bin"
    save_checkpoint(path, {"w": np.ones(3)})
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
