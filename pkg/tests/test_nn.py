import numpy as np
import pytest

from falconbc import nn
from falconbc.errors import DimMismatch, EmptyArchitecture, ShapeMismatch


def finite_difference_grads(params, x, upstream, h=1e-6):
    """Central-difference oracle for d(sum(upstream*output))/dtheta."""

    def loss(p):
        return float(np.sum(np.asarray(upstream) * nn.mlp_forward(p, x)))

    w_grads, b_grads = [], []
    for li in range(params.n_layers):
        gw = np.zeros_like(params.weights[li])
        for idx in np.ndindex(*gw.shape):
            p_hi = params.copy()
            p_lo = params.copy()
            p_hi.weights[li][idx] += h
            p_lo.weights[li][idx] -= h
            gw[idx] = (loss(p_hi) - loss(p_lo)) / (2 * h)
        w_grads.append(gw)
        gb = np.zeros_like(params.biases[li])
        for idx in np.ndindex(*gb.shape):
            p_hi = params.copy()
            p_lo = params.copy()
            p_hi.biases[li][idx] += h
            p_lo.biases[li][idx] -= h
            gb[idx] = (loss(p_hi) - loss(p_lo)) / (2 * h)
        b_grads.append(gb)
    return w_grads, b_grads


def test_zero_final_layer_gives_zero_output():
    p = nn.mlp_init([2, 8, 1], rng_seed=3, zero_final_layer=True)
    for x in np.random.default_rng(0).normal(size=(5, 2)):
        assert np.all(nn.mlp_forward(p, x) == 0.0)


def test_init_is_deterministic():
    a = nn.mlp_init([3, 8, 3], rng_seed=7)
    b = nn.mlp_init([3, 8, 3], rng_seed=7)
    for wa, wb in zip(a.weights, b.weights):
        assert np.array_equal(wa, wb)


def test_init_rejects_single_width():
    with pytest.raises(EmptyArchitecture):
        nn.mlp_init([1])


def test_forward_affine_layer():
    p = nn.MlpParams(widths=(1, 1), weights=[np.array([[2.0]])],
                     biases=[np.array([1.0])], activation="identity")
    assert nn.mlp_forward(p, np.array([3.0])) == pytest.approx(7.0)


def test_forward_zero_params_zero_output():
    p = nn.mlp_init([4, 6, 2], rng_seed=0)
    for w in p.weights:
        w[:] = 0.0
    x = np.random.default_rng(1).normal(size=4)
    assert np.all(nn.mlp_forward(p, x) == 0.0)


def test_forward_dim_mismatch():
    p = nn.mlp_init([3, 4, 2], rng_seed=0)
    with pytest.raises(DimMismatch):
        nn.mlp_forward(p, np.zeros(5))


def test_forward_is_pure():
    p = nn.mlp_init([3, 10, 2], rng_seed=5)
    x = np.random.default_rng(2).normal(size=3)
    y1 = nn.mlp_forward(p, x)
    y2 = nn.mlp_forward(p, x)
    assert np.array_equal(y1, y2)


def test_grad_single_affine_layer():
    p = nn.MlpParams(widths=(1, 1), weights=[np.array([[0.5]])],
                     biases=[np.array([0.0])], activation="identity")
    g = nn.mlp_grad(p, np.array([3.0]), np.array([1.0]))
    assert g.weights[0] == pytest.approx(np.array([[3.0]]))
    assert g.biases[0] == pytest.approx(np.array([1.0]))


def test_grad_matches_finite_differences():
    rng = np.random.default_rng(11)
    p = nn.mlp_init([3, 6, 2], rng_seed=11)
    x = rng.normal(size=3)
    upstream = rng.normal(size=2)
    g = nn.mlp_grad(p, x, upstream)
    fw, fb = finite_difference_grads(p, x, upstream)
    for ga, gf in zip(g.weights + g.biases, fw + fb):
        denom = np.maximum(np.abs(gf), 1e-6)
        assert np.max(np.abs(ga - gf) / denom) < 1e-5


def test_grad_zero_upstream():
    p = nn.mlp_init([2, 5, 3], rng_seed=4)
    g = nn.mlp_grad(p, np.ones(2), np.zeros(3))
    assert all(np.all(w == 0) for w in g.weights)
    assert all(np.all(b == 0) for b in g.biases)


def test_grad_input_gradient_matches_fd():
    rng = np.random.default_rng(8)
    p = nn.mlp_init([4, 7, 3], rng_seed=8)
    x = rng.normal(size=4)
    upstream = rng.normal(size=3)
    g = nn.mlp_grad(p, x, upstream)
    h = 1e-6
    for k in range(4):
        xp, xm = x.copy(), x.copy()
        xp[k] += h
        xm[k] -= h
        fd = (np.sum(upstream * nn.mlp_forward(p, xp))
              - np.sum(upstream * nn.mlp_forward(p, xm))) / (2 * h)
        assert g.x_grad[k] == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_adam_zero_grad_keeps_params():
    p = nn.mlp_init([2, 4, 1], rng_seed=1)
    state = nn.adam_init(p, lr=0.1)
    p2, state2 = nn.adam_step(state, p, nn.zero_grads(p))
    assert state2.step == 1
    for a, b in zip(p.weights, p2.weights):
        assert np.allclose(a, b)


def test_adam_first_step_is_signed_lr():
    p = nn.MlpParams(widths=(1, 1), weights=[np.array([[1.0]])],
                     biases=[np.array([0.0])], activation="identity")
    state = nn.adam_init(p, lr=0.1)
    g = nn.MlpGrads(weights=[np.array([[1.0]])], biases=[np.array([0.0])])
    p2, _ = nn.adam_step(state, p, g)
    # bias correction makes the first update ~ lr * sign(g)
    assert p2.weights[0][0, 0] == pytest.approx(1.0 - 0.1, rel=1e-6)


def test_adam_lr_decay_schedule():
    p = nn.mlp_init([1, 1], rng_seed=0)
    state = nn.adam_init(p, lr=0.05, decay=0.9999)
    g = nn.zero_grads(p)
    for _ in range(10):
        p, state = nn.adam_step(state, p, g)
    assert state.lr == pytest.approx(0.05 * 0.9999 ** 10)


def test_adam_shape_mismatch():
    p = nn.mlp_init([2, 3, 1], rng_seed=0)
    state = nn.adam_init(p)
    bad = nn.zero_grads(nn.mlp_init([2, 4, 1], rng_seed=0))
    with pytest.raises(ShapeMismatch):
        nn.adam_step(state, p, bad)


def test_training_reduces_quadratic_loss():
    rng = np.random.default_rng(42)
    x = rng.uniform(-1, 1, size=(64, 1))
    y = 3.0 * (x - 0.2) ** 2

    p = nn.mlp_init([1, 16, 1], rng_seed=42)
    state = nn.adam_init(p, lr=0.02)

    def loss_and_grads(p):
        pred, cache = nn.mlp_forward_cached(p, x)
        resid = pred - y
        loss = float(np.mean(resid ** 2))
        grads = nn.mlp_backward(p, cache, 2.0 * resid / x.shape[0])
        return loss, grads

    loss0, _ = loss_and_grads(p)
    for _ in range(200):
        _, grads = loss_and_grads(p)
        p, state = nn.adam_step(state, p, grads)
    loss1, _ = loss_and_grads(p)
    assert loss1 <= 0.1 * loss0


def test_checkpoint_roundtrip(tmp_path):
    p = nn.mlp_init([3, 9, 2], rng_seed=13)
    path = tmp_path / "ckpt.json"
    nn.save_checkpoint(p, path, step=17)
    q, step = nn.load_checkpoint(path)
    assert step == 17
    assert q.widths == p.widths
    assert q.activation == p.activation
    for a, b in zip(p.weights + p.biases, q.weights + q.biases):
        assert np.array_equal(a, b)
