import struct

import numpy as np
import pytest
from conftest import grad_error, numeric_grad, relative_error

from buildpoly import autodiff as ad
from buildpoly.errors import ContractError, DataFormatError
from buildpoly.nn import MLP, Conv2d, Linear, ResBlock
from buildpoly.optim import (
    MAGIC,
    Adam,
    AdamConfig,
    AdamState,
    adam_step,
    load_checkpoint,
    save_checkpoint,
)

TOL = 1e-4
rng = np.random.default_rng(0)


def R(*shape):
    return rng.normal(size=shape)


def away_from_zero(*shape):
    x = R(*shape)
    return x + np.sign(x) * 0.3


ELEMENTWISE = {
    "add": (lambda a, b: ad.sum_(a + b * 2.0), [R(3, 4), R(4)]),
    "sub": (lambda a, b: ad.sum_((a - b) * (a - b)), [R(3, 4), R(3, 1)]),
    "mul": (lambda a, b: ad.sum_(a * b), [R(2, 3), R(2, 3)]),
    "div": (lambda a, b: ad.sum_(a / b), [R(2, 3), away_from_zero(2, 3)]),
    "neg_pow": (lambda a: ad.sum_(-(a**3.0)), [R(5)]),
    "exp": (lambda a: ad.sum_(ad.exp(a)), [R(4)]),
    "log": (lambda a: ad.sum_(ad.log(a)), [np.abs(R(4)) + 0.5]),
    "sqrt": (lambda a: ad.sum_(ad.sqrt(a)), [np.abs(R(4)) + 0.5]),
    "abs": (lambda a: ad.sum_(ad.abs_(a) * a), [away_from_zero(6)]),
    "relu": (lambda a: ad.sum_(ad.relu(a) * a), [away_from_zero(6)]),
    "sigmoid": (lambda a: ad.sum_(ad.sigmoid(a) * a), [R(6) * 3]),
    "clamp": (lambda a: ad.sum_(ad.clamp(a, -0.5, 0.5) * a), [away_from_zero(8)]),
    "hardtanh": (lambda a: ad.sum_(ad.hardtanh(a * 2.0) * a), [R(8) * 0.37 + 0.05]),
    "atan2": (lambda y, x: ad.sum_(ad.atan2(y, x)), [R(6), R(6)]),
    "maximum": (lambda a, b: ad.sum_(ad.maximum(a, b) * a), [R(6), R(6) + 5.0]),
    "where": (lambda a, b: ad.sum_(ad.where(np.array([1, 0, 1, 0], bool), a, b) ** 2.0), [R(4), R(4)]),
}

REDUCTIONS = {
    "sum_axis": (lambda a: ad.sum_(ad.sum_(a, axis=1) ** 2.0), [R(3, 4)]),
    "mean": (lambda a: ad.sum_(ad.mean(a, axis=0, keepdims=True) * a), [R(3, 4)]),
    "max": (lambda a: ad.sum_(ad.max_(a, axis=-1) ** 2.0), [R(3, 5)]),
    "max_all": (lambda a: ad.max_(a) * 3.0, [R(3, 5)]),
    "logsumexp": (lambda a: ad.sum_(ad.logsumexp(a, axis=0)), [R(4, 3)]),
    "softmax": (lambda a: ad.sum_(ad.softmax(a, axis=-1) * np.arange(5.0)), [R(2, 5)]),
    "log_softmax": (lambda a, w=R(4, 2): ad.sum_(ad.log_softmax(a, axis=0) * w), [R(4, 2)]),
}

SHAPES = {
    "reshape_transpose": (lambda a: ad.sum_(a.reshape(4, 3).T * np.arange(12.0).reshape(3, 4)), [R(2, 6)]),
    "swapaxes": (lambda a, w=R(4, 3, 2): ad.sum_(ad.swapaxes(a, 0, 2) * w), [R(2, 3, 4)]),
    "getitem_fancy": (lambda a: ad.sum_(a[np.array([0, 0, 2]), np.array([1, 1, 3])] ** 2.0), [R(3, 4)]),
    "getitem_slice": (lambda a: ad.sum_(a[:, 1:3] ** 2.0), [R(3, 4)]),
    "gather_rows": (lambda a: ad.sum_(ad.gather_rows(a, np.array([2, 0, 2])) ** 2.0), [R(3, 2)]),
    "concat_stack": (
        lambda a, b: ad.sum_(ad.concat([a, b], axis=1) ** 2.0) + ad.sum_(ad.stack([a, a]) * 0.5),
        [R(2, 3), R(2, 2)],
    ),
    "broadcast_to": (lambda a, w=R(3, 4): ad.sum_(ad.broadcast_to(a, (3, 4)) * w), [R(1, 4)]),
    "matmul": (lambda a, b: ad.sum_((a @ b) ** 2.0), [R(3, 4), R(4, 2)]),
    "matmul_batched": (lambda a, b: ad.sum_((a @ b) ** 2.0), [R(2, 3, 4), R(4, 5)]),
    "matmul_column": (lambda a, b: ad.sum_((a @ b) ** 2.0), [R(3, 4), R(4, 1)]),
}

IMAGE = {
    "conv2d": (lambda x, w, b: ad.sum_(ad.conv2d(x, w, b, padding=1) ** 2.0), [R(2, 2, 5, 5), R(3, 2, 3, 3), R(3)]),
    "conv2d_stride": (lambda x, w: ad.sum_(ad.conv2d(x, w, stride=2) * 1.5), [R(1, 2, 6, 6), R(2, 2, 2, 2)]),
    "max_pool": (lambda x: ad.sum_(ad.max_pool2d(x, 2) ** 2.0), [R(1, 2, 4, 4)]),
    "upsample": (lambda x, w=R(1, 1, 4, 6): ad.sum_(ad.upsample_nearest2d(x, 2) * w), [R(1, 1, 2, 3)]),
}


@pytest.mark.parametrize(
    "name", list(ELEMENTWISE) + list(REDUCTIONS) + list(SHAPES) + list(IMAGE)
)
def test_primitive_matches_finite_differences(name):
    fn, args = {**ELEMENTWISE, **REDUCTIONS, **SHAPES, **IMAGE}[name]
    assert grad_error(fn, *args) < TOL


def test_sum_gradient_is_ones():
    x = ad.tensor(R(3, 2), requires_grad=True)
    ad.sum_(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 2)))


def test_softmax_nll_gradient_identity():
    logits = R(6)
    x = ad.tensor(logits, requires_grad=True)
    (-ad.log_softmax(x)[2]).backward()
    p = np.exp(logits - logits.max())
    p /= p.sum()
    onehot = np.eye(6)[2]
    np.testing.assert_allclose(x.grad, p - onehot, atol=1e-12)


def test_gradients_accumulate_across_calls():
    x = ad.tensor(np.array([1.0, 2.0]), requires_grad=True)
    ad.sum_(x * x).backward()
    ad.sum_(x * x).backward()
    np.testing.assert_allclose(x.grad, 4 * x.data)


def test_non_scalar_backward_rejected():
    x = ad.tensor(R(3), requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_detached_backward_rejected():
    with pytest.raises(ContractError):
        ad.tensor(1.0).backward()


def test_matmul_shape_mismatch():
    with pytest.raises(ContractError):
        ad.matmul(ad.tensor(R(2, 3)), ad.tensor(R(2, 3)))


def test_shared_node_visited_once():
    x = ad.tensor(np.array(3.0), requires_grad=True)
    y = x * x
    z = y + y + y
    order = ad.topological_order(z)
    assert len(order) == len({id(n) for n in order})
    z.backward()
    assert x.grad == pytest.approx(18.0)


def test_deep_chain_does_not_recurse():
    x = ad.tensor(np.array(1.0), requires_grad=True)
    y = x
    for _ in range(5000):
        y = y * 1.0
    y.backward()
    assert x.grad == 1.0


def test_no_grad_records_nothing():
    x = ad.tensor(R(3), requires_grad=True)
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad
    assert ad.is_grad_enabled()


def test_determinism_bit_identical():
    def run():
        w = ad.tensor(np.random.default_rng(7).normal(size=(2, 3, 3, 3)), requires_grad=True)
        x = np.random.default_rng(8).normal(size=(1, 3, 6, 6))
        loss = ad.sum_(ad.sigmoid(ad.conv2d(x, w, padding=1)) ** 2.0)
        loss.backward()
        return loss.item(), w.grad.copy()

    (a, ga), (b, gb) = run(), run()
    assert a == b
    assert np.array_equal(ga, gb)


def test_layers_match_finite_differences():
    r = np.random.default_rng(3)
    x, img = R(4, 3), R(1, 2, 5, 5)
    cases = [(Linear(3, 2, r), x), (MLP([3, 4, 2], r), x), (Conv2d(2, 2, 3, r), img), (ResBlock(2, r), img)]
    for module, inp in cases:
        module.zero_grad()
        ad.sum_(module(inp) ** 2.0).backward()
        for name, p in module.parameters().items():
            base = p.data.copy()

            def f(arr, p=p, module=module, inp=inp, base=base):
                p.data = arr
                with ad.no_grad():
                    v = ad.sum_(module(inp) ** 2.0).item()
                p.data = base
                return v

            assert relative_error(p.grad, numeric_grad(f, base.copy())) < TOL, name


# Adam ----------------------------------------------------------------------------------


def test_adam_one_step_decreases_quadratic():
    params = {"x": np.array([1.0])}
    new, state = adam_step(params, {"x": 2 * params["x"]}, AdamState(), AdamConfig(lr=0.1))
    assert abs(new["x"][0]) < 1.0
    assert state.step == 1


def test_adam_zero_gradient_leaves_params():
    params = {"x": np.array([1.0, -2.0])}
    new, state = adam_step(params, {"x": np.zeros(2)}, AdamState(), AdamConfig())
    np.testing.assert_array_equal(new["x"], params["x"])
    assert state.step == 1


def test_adam_converges_on_quadratic():
    params, state = {"x": np.array([1.0])}, AdamState()
    cfg = AdamConfig(lr=0.05)
    for _ in range(200):
        params, state = adam_step(params, {"x": 2 * params["x"]}, state, cfg)
    assert abs(params["x"][0]) < 1e-3


def test_adam_class_updates_in_place():
    x = ad.tensor(np.array([1.0]), requires_grad=True)
    opt = Adam({"x": x}, AdamConfig(lr=0.1))
    ad.sum_(x * x).backward()
    opt.step()
    assert x.data[0] < 1.0
    assert set(opt.state_arrays()) == {"adam.m.x", "adam.v.x", "adam.t.x"}


def test_adam_skips_missing_gradients():
    params = {"a": np.array([1.0]), "b": np.array([1.0])}
    state, cfg = AdamState(), AdamConfig(lr=0.1)
    for _ in range(50):
        params, state = adam_step(params, {"a": 2 * params["a"], "b": None}, state, cfg)
    assert params["b"][0] == 1.0 and "b" not in state.m
    assert state.step == 50 and state.t == {"a": 50}
    # b's first real update uses a fresh bias correction: a step of exactly lr
    params, state = adam_step(params, {"a": 2 * params["a"], "b": np.array([4.0])}, state, cfg)
    assert params["b"][0] == pytest.approx(0.9, abs=1e-6)
    assert state.t == {"a": 51, "b": 1}


# checkpoints ------------------------------------------------------------------------------


def test_checkpoint_round_trip_and_layout(tmp_path):
    arrays = {"b": np.arange(6.0).reshape(2, 3), "a": np.array([1.5])}
    path = tmp_path / "ck.bin"
    save_checkpoint(path, arrays, {"step": 3})
    back, meta = load_checkpoint(path)
    assert meta == {"step": 3}
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])
    raw = path.read_bytes()
    assert raw[:8] == MAGIC
    (hlen,) = struct.unpack("<Q", raw[8:16])
    # payload: tensors sorted by name, raw little-endian float64
    payload = raw[16 + hlen :]
    assert np.frombuffer(payload[:8], "<f8")[0] == 1.5
    assert np.array_equal(np.frombuffer(payload[8:], "<f8"), np.arange(6.0))


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOTACKPT" + b"\0" * 16)
    with pytest.raises(DataFormatError):
        load_checkpoint(path)
