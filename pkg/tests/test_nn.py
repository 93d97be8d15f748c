import numpy as np
import pytest
from hypothesis import given, strategies as st

from livingarch import _kernels
from livingarch.nn import (
    Adam, DenseNet, gradient_relative_error, layer_norm, numerical_gradient, read_checkpoint,
    soft_update, write_checkpoint,
)

from oracles import gradient_check_sample


def test_gradients_match_finite_differences():
    errs = [gradient_check_sample(s) for s in range(100)]
    assert max(errs) <= 1e-4, max(errs)


def test_compiled_passes_match_reference():
    rng = np.random.default_rng(0)
    for hidden, out in (("relu", "tanh"), ("tanh", "identity")):
        net = DenseNet((24, 64, 64, 11), hidden, out, random_state=1)
        X = rng.normal(size=(64, 24))
        G = rng.normal(size=(64, 11))
        Y = net.forward(X)
        grads, gin = net.backward(G)
        Y2, g2, gin2 = _kernels.forward_backward(net.flat, X, G, *_kernels.arch_arrays(net), True)
        assert np.allclose(Y, Y2, atol=1e-13)
        assert np.allclose(net.flat_grad(grads), g2, atol=1e-12)
        assert np.allclose(gin, gin2, atol=1e-13)


def test_numerical_gradient_of_quadratic():
    x = np.array([1.0, -2.0, 0.5])
    assert np.allclose(numerical_gradient(lambda v: float(v @ v), x), 2 * x, atol=1e-9)
    assert gradient_relative_error([1.0, 2.0], [1.0, 2.0002]) == pytest.approx(0.0002 / 2.0002)


def test_backward_without_forward():
    net = DenseNet((3, 4, 2), random_state=0)
    with pytest.raises(RuntimeError):
        net.backward(np.ones(2))


def test_forward_validates_width():
    net = DenseNet((3, 4, 2), random_state=0)
    with pytest.raises(ValueError):
        net.forward(np.ones(4))
    with pytest.raises(ValueError):
        net.forward(np.array([1.0, np.nan, 0.0]))


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=64).filter(lambda v: np.ptp(v) > 1e-3))
def test_layer_norm_standardizes(v):
    z = layer_norm(np.array([v]))
    assert abs(z.mean()) < 1e-10
    assert abs(z.var() - 1.0) < 1e-10


def test_layer_norm_of_constant_row_is_zero():
    assert not layer_norm(np.full((1, 5), 3.0)).any()


def test_forward_is_deterministic():
    a = DenseNet((5, 8, 3), "relu", "tanh", random_state=4)
    b = DenseNet((5, 8, 3), "relu", "tanh", random_state=4)
    x = np.linspace(-1, 1, 5)
    assert a.forward(x).tobytes() == b.forward(x).tobytes()


def test_initialization_bounds():
    net = DenseNet((24, 64, 64, 11), random_state=0)
    W_last = net.params[-2]
    assert np.abs(W_last).max() <= 3e-3 and np.abs(net.params[-1]).max() <= 3e-3
    assert np.abs(net.params[0]).max() <= 1 / np.sqrt(24)
    assert np.all(net.params[2] == 1.0) and np.all(net.params[3] == 0.0)


def test_soft_update_examples():
    t, s = [np.zeros(3)], [np.full(3, 2.0)]
    soft_update(t, s, 0.5)
    assert np.all(t[0] == 1.0)
    soft_update(t, s, 0.0)
    assert np.all(t[0] == 1.0)
    with pytest.raises(ValueError):
        soft_update([np.zeros(2)], [np.zeros(3)], 0.1)


def test_soft_update_contraction_is_geometric():
    src = DenseNet((4, 6, 2), random_state=0)
    tgt = DenseNet((4, 6, 2), random_state=1)
    d0 = np.linalg.norm(tgt.flat - src.flat)
    tau = 0.125
    for k in range(1, 20):
        soft_update(tgt, src, tau)
        assert np.linalg.norm(tgt.flat - src.flat) == pytest.approx((1 - tau) ** k * d0, rel=1e-12)


def test_adam_first_step_and_errors():
    p = [np.array([1.0, -1.0])]
    opt = Adam(p, learning_rate=0.1)
    opt.step(p, [np.array([3.0, -0.5])])
    # the first bias-corrected step moves each coordinate by about lr
    assert np.allclose(p[0], [0.9, -0.9], atol=1e-6)
    with pytest.raises(FloatingPointError):
        opt.step(p, [np.array([np.inf, 0.0])])
    with pytest.raises(ValueError):
        opt.step(p, [np.zeros(3)])


def test_adam_minimizes_quadratic():
    p = [np.array([5.0, -3.0])]
    opt = Adam(p, learning_rate=0.05)
    for _ in range(2000):
        opt.step(p, [2 * p[0]])
    assert np.abs(p[0]).max() < 1e-2


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    arrays = [rng.normal(size=(3, 4)), rng.normal(size=5), np.array([1.0])]
    path = tmp_path / "x.ckpt"
    write_checkpoint(path, {"kind": "test"}, arrays)
    desc, back = read_checkpoint(path)
    assert desc["kind"] == "test"
    assert all(a.tobytes() == b.tobytes() for a, b in zip(arrays, back))


@pytest.mark.parametrize("damage", ["magic", "truncate", "trailing", "version"])
def test_checkpoint_corruption_detected(tmp_path, damage):
    path = tmp_path / "x.ckpt"
    write_checkpoint(path, {"kind": "test"}, [np.arange(6.0)])
    data = bytearray(path.read_bytes())
    if damage == "magic":
        data[0] ^= 0xFF
    elif damage == "truncate":
        data = data[:-3]
    elif damage == "trailing":
        data += b"\x00"
    else:
        data[8] = 99
    path.write_bytes(bytes(data))
    with pytest.raises(ValueError):
        read_checkpoint(path)


def test_invalid_construction():
    with pytest.raises(ValueError):
        DenseNet((3,))
    with pytest.raises(ValueError):
        DenseNet((3, 2), hidden_activation="sigmoid")


def test_linear_net_examples():
    net = DenseNet((3, 3), "relu", "identity", layer_norm=False, random_state=0)
    net.set_flat(np.r_[np.eye(3).ravel(), np.zeros(3)])
    x = np.array([[0.5, -2.0, 3.0]])
    assert np.array_equal(net.forward(x), x)
    rng = np.random.default_rng(0)
    W, y = rng.normal(size=(3, 3)), rng.normal(size=(1, 3))
    net.set_flat(np.r_[W.ravel(), np.zeros(3)])
    r = net.forward(x) - y
    grads, _ = net.backward(2 * r)
    assert np.allclose(grads[0], x.T @ (2 * r))
    zero, _ = net.backward(np.zeros((1, 3)))
    assert not any(g.any() for g in zero)


def test_actor_outputs_bounded():
    net = DenseNet((24, 64, 64, 11), "relu", "tanh", random_state=0)
    out = net.forward(np.random.default_rng(0).normal(scale=100, size=(50, 24)))
    assert np.all(np.abs(out) <= 1.0)


def test_adam_examples():
    p = [np.array([0.0])]
    opt = Adam(p, learning_rate=1e-3)
    opt.step(p, [np.array([1.0])])
    assert p[0][0] == pytest.approx(-1e-3, rel=1e-6)
    q = [np.array([2.0])]
    Adam(q, learning_rate=1e-3).step(q, [np.array([0.0])])
    assert q[0][0] == 2.0


def test_soft_update_full_copy():
    t, s = [np.zeros(4)], [np.arange(4.0)]
    soft_update(t, s, 1.0)
    assert np.array_equal(t[0], s[0])
