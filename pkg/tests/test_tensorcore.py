import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vampire import tensorcore as tc
from vampire.errors import CheckpointError, DimensionError, MissingFileError, OptimizerError
from vampire.tensorcore import Tensor


def _x(rng, shape=(3, 4)):
    return Tensor(rng.normal(size=shape), requires_grad=True)


UNARY = {
    "exp": tc.exp, "tanh": tc.tanh, "sigmoid": tc.sigmoid, "silu": tc.silu, "softplus": tc.softplus,
    "sum_axis0": lambda x: tc.tsum(x, axis=0), "mean": lambda x: tc.mean(x, axis=1),
    "reshape": lambda x: tc.reshape(x, (4, 3)), "transpose": lambda x: tc.transpose(x),
    "getitem_basic": lambda x: x[1:, ::2], "getitem_fancy": lambda x: x[np.array([0, 2, 0])],
    "softmax": lambda x: tc.softmax(x, axis=-1),
    "softmax_masked": lambda x: tc.softmax(x, axis=-1, mask=np.array([True, False, True, True])),
    "expand": lambda x: tc.expand(x[:1], (3, 4)),
    "concat": lambda x: tc.concat([x, x * x], axis=0),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_op_gradients(name):
    rng = np.random.default_rng(1)
    x = _x(rng)
    w = rng.normal(size=UNARY[name](x).shape)
    err = tc.gradient_check(lambda t: tc.tsum(UNARY[name](t) * Tensor(w)), x)
    assert err < 1e-6


@pytest.mark.parametrize("op", [tc.add, tc.sub, tc.mul])
def test_binary_broadcast_gradients(op):
    rng = np.random.default_rng(2)
    x, b = _x(rng), Tensor(rng.normal(size=(4,)), requires_grad=True)
    assert tc.gradient_check(lambda t: tc.tsum(op(t, b) * op(t, b)), x) < 1e-6
    assert tc.gradient_check(lambda t: tc.tsum(op(x, t) * op(x, t)), b) < 1e-6


def test_matmul_and_layer_norm_gradients():
    rng = np.random.default_rng(3)
    x, w = _x(rng), _x(rng, (4, 2))
    assert tc.gradient_check(lambda t: tc.tsum(tc.tanh(t @ w)), x) < 1e-6
    assert tc.gradient_check(lambda t: tc.tsum(tc.tanh(x @ t)), w) < 1e-6
    g, b = Tensor(rng.normal(size=4), requires_grad=True), Tensor(rng.normal(size=4), requires_grad=True)
    c = Tensor(rng.normal(size=(3, 4)))
    assert tc.gradient_check(lambda t: tc.tsum(tc.layer_norm(t, g, b) * c), x) < 1e-6
    assert tc.gradient_check(lambda t: tc.tsum(tc.layer_norm(x, t, b) * c), g) < 1e-6


def test_gather_scatter_gradients_and_roundtrip():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(2, 5, 3)), requires_grad=True)
    idx = np.stack([rng.permutation(5) for _ in range(2)])
    w = Tensor(rng.normal(size=(2, 5, 3)))
    assert tc.gradient_check(lambda t: tc.tsum(tc.gather(t, idx) * w), x) < 1e-6
    assert tc.gradient_check(lambda t: tc.tsum(tc.scatter(t, idx) * w), x) < 1e-6
    np.testing.assert_array_equal(tc.scatter(tc.gather(x, idx), idx).data, x.data)


@given(st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_gather_then_scatter_is_identity(n, seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(3, n, 2)))
    idx = np.stack([rng.permutation(n) for _ in range(3)])
    np.testing.assert_array_equal(tc.scatter(tc.gather(x, idx), idx).data, x.data)


def test_selective_scan_gradients_all_inputs():
    rng = np.random.default_rng(5)
    b, L, E, N = 2, 4, 3, 2
    args = [rng.normal(size=(b, L, E)), rng.uniform(0.1, 0.5, (b, L, E)), -rng.uniform(0.5, 2, (E, N)),
            rng.normal(size=(b, L, N)), rng.normal(size=(b, L, N)), rng.normal(size=E)]
    ts = [Tensor(a, requires_grad=True) for a in args]
    w = Tensor(rng.normal(size=(b, L, E)))
    for i in range(6):
        def f(t, i=i):
            parts = list(ts)
            parts[i] = t
            return tc.tsum(tc.selective_scan(*parts) * w)
        assert tc.gradient_check(f, ts[i]) < 1e-6, i


def test_selective_scan_impulse_decays_geometrically():
    L, dt = 6, 0.3
    u = np.zeros((1, L, 1))
    u[0, 0, 0] = 1.0
    y = tc.selective_scan(Tensor(u), Tensor(np.full((1, L, 1), dt)), Tensor(np.array([[-1.0]])),
                          Tensor(np.ones((1, L, 1))), Tensor(np.ones((1, L, 1))), Tensor(np.zeros(1))).data[0, :, 0]
    np.testing.assert_allclose(y[1:] / y[:-1], math.exp(-dt), rtol=1e-12)
    assert y[0] == pytest.approx(dt)


def test_softmax_uniform_and_rows_sum_to_one():
    out = tc.softmax(Tensor(np.zeros((2, 5))), axis=-1).data
    np.testing.assert_allclose(out, 0.2)
    x = Tensor(np.random.default_rng(0).normal(size=(3, 7)) * 30)
    np.testing.assert_allclose(tc.softmax(x).data.sum(-1), 1.0, atol=1e-12)


def test_matmul_identity():
    x = np.random.default_rng(0).normal(size=(3, 4))
    np.testing.assert_array_equal(tc.matmul(Tensor(x), Tensor(np.eye(4))).data, x)
    with pytest.raises(DimensionError):
        tc.matmul(Tensor(x), Tensor(np.eye(3)))


def test_gradient_check_quadratic_and_constant():
    x = Tensor(np.random.default_rng(0).normal(size=5))
    assert tc.gradient_check(lambda t: tc.tsum(t * t), x) < 1e-8
    assert tc.gradient_check(lambda t: tc.tsum(Tensor(np.ones(3))), x) == 0.0
    with pytest.raises(ValueError):
        tc.gradient_check(lambda t: t * t, x)


def test_bce_closed_forms():
    assert tc.bce_with_logits(Tensor(np.zeros((4, 5))), np.ones((4, 5))).item() == pytest.approx(math.log(2), abs=1e-12)
    z = np.array([[20.0, -20.0, 20.0]])
    assert tc.bce_with_logits(Tensor(z), np.array([[1, 0, 1]])).item() < 1e-8
    z = np.array([1.0, -1.0, 0.0, 2.0, -2.0])
    y = np.array([1, 0, 0, 1, 1])
    p = 1 / (1 + np.exp(-z))
    expected = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert tc.bce_with_logits(Tensor(z[None]), y[None]).item() == pytest.approx(expected, rel=1e-12)


def test_bce_is_stable_at_extreme_logits():
    v = tc.bce_with_logits(Tensor(np.array([[800.0, -800.0]])), np.array([[0, 1]])).item()
    assert v == pytest.approx(800.0)


def test_adamw_zero_grad_zero_decay_keeps_params():
    p = np.array([1.0, -2.0])
    tc.adamw_step([p], [np.zeros(2)], tc.OptimizerState(weight_decay=0.0), lr=0.1)
    np.testing.assert_array_equal(p, [1.0, -2.0])


def test_adamw_decay_only_halves():
    p = np.array([4.0, -2.0])
    tc.adamw_step([p], [np.zeros(2)], tc.OptimizerState(weight_decay=0.5), lr=1.0)
    np.testing.assert_array_equal(p, [2.0, -1.0])


def test_adamw_minimises_scalar_quadratic():
    x = np.array([0.0])
    state = tc.OptimizerState(weight_decay=0.0)
    for _ in range(500):
        tc.adamw_step([x], [2 * (x - 3)], state, lr=0.1)
    assert abs(x[0] - 3) < 1e-2


def test_adamw_without_decay_matches_adam_recurrence():
    rng = np.random.default_rng(7)
    p = rng.normal(size=4)
    ref = p.copy()
    m = np.zeros(4)
    v = np.zeros(4)
    state = tc.OptimizerState(weight_decay=0.0)
    b1, b2, eps, lr = 0.9, 0.999, 1e-8, 1e-2
    for t in range(1, 101):
        g = rng.normal(size=4)
        tc.adamw_step([p], [g], state, lr=lr)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        ref = ref - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    np.testing.assert_allclose(p, ref, rtol=1e-12, atol=1e-14)


def test_adamw_rejects_non_finite_gradient():
    with pytest.raises(OptimizerError):
        tc.adamw_step([np.zeros(2)], [np.array([np.nan, 0.0])], tc.OptimizerState())


def test_cosine_lr_endpoints():
    assert tc.cosine_lr(0, 100, 1e-4) == 1e-4
    assert tc.cosine_lr(100, 100, 1e-4) == 0.0
    assert tc.cosine_lr(50, 100, 1e-4) == pytest.approx(5e-5, rel=1e-12)
    with pytest.warns(UserWarning):
        assert tc.cosine_lr(101, 100, 1e-4) == 0.0


@given(st.integers(0, 1000), st.integers(1, 1000))
def test_cosine_lr_bounded(step, total):
    if step <= total:
        assert 0.0 <= tc.cosine_lr(step, total, 1.0) <= 1.0


def test_checkpoint_roundtrip_and_corruption(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"a.weight": rng.normal(size=(3, 2)), "b": rng.normal(size=4), "s": np.array(1.5)}
    path = tc.save_checkpoint(tmp_path / "m.ckpt", arrays.items())
    back = tc.load_checkpoint(path)
    assert list(back) == list(arrays)
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])
    blob = bytearray(path.read_bytes())
    blob[10] ^= 0xFF
    (tmp_path / "bad.ckpt").write_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        tc.load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "short.ckpt").write_bytes(b"\x01")
    with pytest.raises(CheckpointError):
        tc.load_checkpoint(tmp_path / "short.ckpt")
    with pytest.raises(MissingFileError):
        tc.load_checkpoint(tmp_path / "none.ckpt")


def test_trunc_normal_bounds():
    x = tc.trunc_normal(np.random.default_rng(0), (2000,), std=0.02)
    assert np.abs(x).max() <= 0.04
    assert 0.015 < x.std() < 0.02
