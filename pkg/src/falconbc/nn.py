"""Minimal feed-forward network machinery.

Dense multilayer perceptrons with sigmoid-weighted-linear hidden units and
a linear output layer, reverse-mode gradients, a bias-corrected Adam
optimizer with geometric learning-rate decay, and JSON checkpoints.
Everything runs in float64 and is deterministic for a fixed seed.

Parameters are treated as immutable values: ``adam_step`` returns fresh
arrays instead of mutating its inputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DimMismatch, EmptyArchitecture, ShapeMismatch

ACTIVATIONS = ("silu", "identity")

# He-style fan-in scaled uniform init: U(-limit, limit), limit = sqrt(6 / fan_in).
INIT_GAIN = 6.0


@dataclass
class MlpParams:
    """Weights and biases of a dense feed-forward stack.

    ``weights[i]`` has shape (widths[i+1], widths[i]); hidden layers apply
    the configured activation, the final layer is always linear.
    """

    widths: tuple
    weights: list
    biases: list
    activation: str = "silu"

    @property
    def n_layers(self):
        return len(self.weights)

    @property
    def in_dim(self):
        return self.widths[0]

    @property
    def out_dim(self):
        return self.widths[-1]

    def copy(self):
        return MlpParams(
            widths=tuple(self.widths),
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            activation=self.activation,
        )


@dataclass
class MlpGrads:
    """Parameter gradients plus the gradient w.r.t. the network input."""

    weights: list
    biases: list
    x_grad: np.ndarray = None

    def scaled(self, factor):
        return MlpGrads(
            weights=[w * factor for w in self.weights],
            biases=[b * factor for b in self.biases],
            x_grad=None if self.x_grad is None else self.x_grad * factor,
        )


def mlp_init(widths, activation="silu", rng_seed=0, zero_final_layer=False):
    """Create parameters with scaled-uniform weights and zero biases.

    ``zero_final_layer`` zeroes the output layer so the net is the zero map
    at initialization (used by the deformation decoder).
    """
    widths = tuple(int(w) for w in widths)
    if len(widths) < 2:
        raise EmptyArchitecture(f"need at least input and output widths, got {widths}")
    if any(w < 1 for w in widths):
        raise EmptyArchitecture(f"layer widths must be >= 1, got {widths}")
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}, expected one of {ACTIVATIONS}")
    rng = np.random.default_rng(rng_seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        limit = np.sqrt(INIT_GAIN / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    if zero_final_layer:
        weights[-1][:] = 0.0
    return MlpParams(widths=widths, weights=weights, biases=biases, activation=activation)


def _silu(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return z * s


def _silu_prime(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


def mlp_forward(params, x):
    """Evaluate the network; accepts a single vector or an (n, d) batch."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    a = x[None, :] if single else x
    if a.shape[1] != params.in_dim:
        raise DimMismatch(f"input has dim {a.shape[1]}, network expects {params.in_dim}")
    last = params.n_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        a = a @ w.T + b
        if i < last and params.activation == "silu":
            a = _silu(a)
    return a[0] if single else a


def mlp_forward_cached(params, x):
    """Forward pass that keeps per-layer pre-activations for backprop.

    Returns (output, cache); pass the cache to :func:`mlp_backward`.
    """
    a = np.asarray(x, dtype=float)
    if a.ndim == 1:
        a = a[None, :]
    if a.shape[1] != params.in_dim:
        raise DimMismatch(f"input has dim {a.shape[1]}, network expects {params.in_dim}")
    acts = [a]
    pre = []
    last = params.n_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = acts[-1] @ w.T + b
        pre.append(z)
        if i < last and params.activation == "silu":
            acts.append(_silu(z))
        else:
            acts.append(z)
    return acts[-1], (acts, pre)


def mlp_backward(params, cache, upstream):
    """Reverse-mode gradients of sum(upstream * output) w.r.t. parameters and input.

    ``upstream`` must match the cached batch shape; gradients are summed
    over the batch.
    """
    acts, pre = cache
    g = np.asarray(upstream, dtype=float)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != acts[-1].shape:
        raise ShapeMismatch(f"upstream shape {g.shape} != output shape {acts[-1].shape}")
    w_grads = [None] * params.n_layers
    b_grads = [None] * params.n_layers
    last = params.n_layers - 1
    for i in range(last, -1, -1):
        if i < last and params.activation == "silu":
            g = g * _silu_prime(pre[i])
        w_grads[i] = g.T @ acts[i]
        b_grads[i] = g.sum(axis=0)
        g = g @ params.weights[i]
    return MlpGrads(weights=w_grads, biases=b_grads, x_grad=g)


def mlp_grad(params, x, upstream):
    """Gradient bundle for a single input (or batch): convenience wrapper."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    _, cache = mlp_forward_cached(params, x)
    grads = mlp_backward(params, cache, upstream)
    if single:
        grads.x_grad = grads.x_grad[0]
    return grads


def zero_grads(params):
    return MlpGrads(
        weights=[np.zeros_like(w) for w in params.weights],
        biases=[np.zeros_like(b) for b in params.biases],
    )


@dataclass
class AdamState:
    """First/second moment accumulators plus the decaying learning rate."""

    m_w: list
    v_w: list
    m_b: list
    v_b: list
    step: int = 0
    lr: float = 1e-3
    decay: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params, lr=1e-3, decay=1.0):
    return AdamState(
        m_w=[np.zeros_like(w) for w in params.weights],
        v_w=[np.zeros_like(w) for w in params.weights],
        m_b=[np.zeros_like(b) for b in params.biases],
        v_b=[np.zeros_like(b) for b in params.biases],
        lr=float(lr),
        decay=float(decay),
    )


def adam_step(state, params, grads):
    """One bias-corrected Adam update; returns (new_params, new_state).

    The stored learning rate is multiplied by ``state.decay`` after each
    step, giving a geometric schedule.
    """
    for g, p in zip(grads.weights, params.weights):
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} != parameter shape {p.shape}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_w, new_b = [], []
    m_w, v_w, m_b, v_b = [], [], [], []
    for w, gw, mw, vw in zip(params.weights, grads.weights, state.m_w, state.v_w):
        mw = b1 * mw + (1 - b1) * gw
        vw = b2 * vw + (1 - b2) * gw * gw
        new_w.append(w - state.lr * (mw / c1) / (np.sqrt(vw / c2) + state.eps))
        m_w.append(mw)
        v_w.append(vw)
    for b, gb, mb, vb in zip(params.biases, grads.biases, state.m_b, state.v_b):
        mb = b1 * mb + (1 - b1) * gb
        vb = b2 * vb + (1 - b2) * gb * gb
        new_b.append(b - state.lr * (mb / c1) / (np.sqrt(vb / c2) + state.eps))
        m_b.append(mb)
        v_b.append(vb)
    new_params = MlpParams(
        widths=params.widths, weights=new_w, biases=new_b, activation=params.activation
    )
    new_state = AdamState(
        m_w=m_w, v_w=v_w, m_b=m_b, v_b=v_b,
        step=t, lr=state.lr * state.decay, decay=state.decay,
        beta1=b1, beta2=b2, eps=state.eps,
    )
    return new_params, new_state


def save_checkpoint(params, path, step=0):
    """Write a self-describing JSON checkpoint (exact float64 roundtrip)."""
    doc = {
        "widths": list(params.widths),
        "activation": params.activation,
        "weights": [w.ravel().tolist() for w in params.weights],
        "biases": [b.tolist() for b in params.biases],
        "step": int(step),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path):
    with open(path) as fh:
        doc = json.load(fh)
    widths = tuple(doc["widths"])
    weights = [
        np.asarray(w, dtype=float).reshape(widths[i + 1], widths[i])
        for i, w in enumerate(doc["weights"])
    ]
    biases = [np.asarray(b, dtype=float) for b in doc["biases"]]
    params = MlpParams(widths=widths, weights=weights, biases=biases,
                       activation=doc["activation"])
    return params, int(doc["step"])
