import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from memo.errors import DimensionError, StaleTapeError
from memo.nn import (
    Activation, AdamState, ParamStore, adam_step, backward, clip_by_global_norm, global_norm,
    init_mlp, mlp_forward, orthogonal_init,
)

T, I = Activation.TANH, Activation.IDENTITY


def fd_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        fp = f()
        x[idx] = old - eps
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g


def test_single_unit_tanh_value():
    p = ParamStore([np.array([[1.0]])], [np.array([0.0])], [T])
    y, _ = mlp_forward(p, np.array([0.5]))
    assert y[0] == pytest.approx(0.46211716, abs=1e-8)


def test_hand_computed_two_layer():
    # straight-line evaluation of tanh(W1 tanh(W0 x + b0) + b1)
    W0 = np.array([[0.2, -0.4], [0.7, 0.1], [-0.3, 0.5]])
    b0 = np.array([0.1, 0.0, -0.2])
    W1 = np.array([[1.0, -1.0, 0.5]])
    b1 = np.array([0.05])
    x = np.array([0.3, -1.2])
    h0 = np.tanh(0.2 * 0.3 + -0.4 * -1.2 + 0.1)
    h1 = np.tanh(0.7 * 0.3 + 0.1 * -1.2 + 0.0)
    h2 = np.tanh(-0.3 * 0.3 + 0.5 * -1.2 - 0.2)
    expect = 1.0 * h0 - 1.0 * h1 + 0.5 * h2 + 0.05
    y, _ = mlp_forward(ParamStore([W0, W1], [b0, b1], [T, I]), x)
    assert y[0] == pytest.approx(expect, abs=1e-12)


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    p = init_mlp([5, 7, 6, 3], [T, T, I], seed=1)
    for b in p.biases:
        b[:] = rng.normal(size=b.shape) * 0.1
    x = rng.normal(size=(4, 5))
    c = rng.normal(size=(4, 3))

    def loss():
        return float(np.sum(c * mlp_forward(p, x)[0]))

    y, tape = mlp_forward(p, x)
    g = backward(tape, c)
    for i in range(3):
        np.testing.assert_allclose(g.weights[i], fd_grad(loss, p.weights[i]), rtol=1e-5, atol=1e-7)
        np.testing.assert_allclose(g.biases[i], fd_grad(loss, p.biases[i]), rtol=1e-5, atol=1e-7)
    np.testing.assert_allclose(g.input, fd_grad(loss, x), rtol=1e-5, atol=1e-7)


def test_batched_gradient_is_sum_of_per_sample():
    p = init_mlp([3, 4, 2], [T, I], seed=0)
    x = np.random.default_rng(0).normal(size=(5, 3))
    c = np.random.default_rng(1).normal(size=(5, 2))
    g = backward(mlp_forward(p, x)[1], c)
    total = None
    for i in range(5):
        gi = backward(mlp_forward(p, x[i])[1], c[i])
        total = gi if total is None else total.add_(gi)
    for a, b in zip(g.weights, total.weights):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_stale_tape_raises():
    p = init_mlp([2, 3, 1], [T, I], seed=0)
    _, tape = mlp_forward(p, np.ones(2))
    adam_step(p, backward(tape, np.ones(1)), AdamState(), 1e-3)
    with pytest.raises(StaleTapeError):
        backward(tape, np.ones(1))


def test_dimension_errors():
    p = init_mlp([2, 3, 1], [T, I], seed=0)
    with pytest.raises(DimensionError):
        mlp_forward(p, np.ones(3))
    with pytest.raises(DimensionError):
        ParamStore([np.ones((3, 2)), np.ones((1, 4))], [np.zeros(3), np.zeros(1)], [T, I])
    _, tape = mlp_forward(p, np.ones(2))
    with pytest.raises(DimensionError):
        backward(tape, np.ones(2))


def test_adam_first_steps_match_recurrence():
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    p = {"w": np.array([1.0, -2.0])}
    state = AdamState()
    g1, g2 = np.array([0.5, -1.0]), np.array([0.2, 0.3])
    adam_step(p, {"w": g1.copy()}, state, lr)
    # first step with bias correction moves by lr * sign(g)
    np.testing.assert_allclose(p["w"], [1.0 - lr * 0.5 / (0.5 + eps), -2.0 + lr * 1.0 / (1.0 + eps)], atol=1e-12)
    before = p["w"].copy()
    adam_step(p, {"w": g2.copy()}, state, lr)
    m = (1 - b1) * (b1 * g1 + g2)
    v = (1 - b2) * (b2 * g1**2 + g2**2)
    mhat, vhat = m / (1 - b1**2), v / (1 - b2**2)
    np.testing.assert_allclose(p["w"], before - lr * mhat / (np.sqrt(vhat) + eps), atol=1e-12)
    assert state.step == 2


def test_adam_rejects_bad_input():
    with pytest.raises(ValueError):
        adam_step({"w": np.ones(2)}, {"w": np.ones(2)}, AdamState(), 0.0)
    with pytest.raises(DimensionError):
        adam_step({"w": np.ones(2)}, {"w": np.ones(3)}, AdamState(), 1e-3)


def test_clip_by_global_norm():
    g = {"a": np.array([3.0, 0.0]), "b": np.array([[4.0]])}
    norm = clip_by_global_norm(g, 1.0)
    assert norm == pytest.approx(5.0)
    assert global_norm(g.values()) == pytest.approx(1.0, abs=1e-6)
    small = {"a": np.array([0.1])}
    clip_by_global_norm(small, 1.0)
    assert small["a"][0] == 0.1


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.floats(0.1, 3.0), st.integers(0, 2**31 - 1))
def test_orthogonal_init_is_orthonormal(rows, cols, gain, seed):
    w = orthogonal_init(rows, cols, gain, seed)
    assert w.shape == (rows, cols)
    if rows >= cols:
        np.testing.assert_allclose(w.T @ w, gain**2 * np.eye(cols), atol=1e-10)
    else:
        np.testing.assert_allclose(w @ w.T, gain**2 * np.eye(rows), atol=1e-10)


def test_orthogonal_init_errors_and_determinism():
    with pytest.raises(DimensionError):
        orthogonal_init(0, 3)
    with pytest.raises(ValueError):
        orthogonal_init(2, 2, gain=0.0)
    np.testing.assert_array_equal(orthogonal_init(4, 3, seed=5), orthogonal_init(4, 3, seed=5))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_vector_and_batch_forward_agree(seed, batch):
    p = init_mlp([4, 5, 2], [T, I], seed=seed)
    x = np.random.default_rng(seed).normal(size=(batch, 4))
    yb = mlp_forward(p, x)[0]
    for i in range(batch):
        np.testing.assert_allclose(mlp_forward(p, x[i])[0], yb[i], atol=1e-14)
