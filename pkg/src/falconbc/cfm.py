"""Conditional flow matching: training pairs, velocity-net training,
neural-ODE sampling, and bound-based rejection.

Pairs are built on the linear probability path x_t = t*x1 + (1-t)*x0 with
x0 standard normal; the regression target is x1 - x0, which equals the
path velocity (x1 - x_t)/(1 - t) for every t < 1 and stays finite at the
endpoint. Conditioning enters by concatenating [x_t, y, t] at the input
layer. Sampling integrates the learned field from t=0 to 1 with an
adaptive Dormand-Prince solver (fixed-step RK4 as the cross-check route)
and rejects draws outside the prior box.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import nn
from .errors import (
    AllRejected,
    DimMismatch,
    DivergedLoss,
    EmptyDataset,
    RejectionBudgetExceeded,
    StepFailure,
)
from .pipeline import destandardize, standardize
from .validation import as_matrix, as_vector


@dataclass
class PriorBox:
    """Per-dimension [lo, hi]; infinite entries disable that side."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        if self.lo.shape != self.hi.shape or np.any(self.lo >= self.hi):
            raise ValueError("prior box needs elementwise lo < hi")

    @classmethod
    def from_array(cls, bounds):
        bounds = np.asarray(bounds, dtype=float)
        return cls(lo=bounds[:, 0], hi=bounds[:, 1])

    def contains(self, rows):
        rows = np.atleast_2d(rows)
        return np.all((rows >= self.lo) & (rows <= self.hi), axis=1)


@dataclass
class CfmModel:
    """Velocity network plus the statistics and bounds it was trained with."""

    net: nn.MlpParams
    mu_x: np.ndarray
    sigma_x: np.ndarray
    mu_y: np.ndarray
    sigma_y: np.ndarray
    bounds: PriorBox = None
    x_names: list = field(default_factory=list)
    y_names: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def d(self):
        return self.mu_x.shape[0]

    @property
    def m(self):
        return self.mu_y.shape[0]

    def velocity(self, x, t, y_std):
        """Evaluate the conditional velocity field on an (n, d) batch."""
        x = np.atleast_2d(x)
        n = x.shape[0]
        y_std = np.atleast_2d(y_std)
        if y_std.shape[0] == 1 and n > 1:
            y_std = np.broadcast_to(y_std, (n, self.m))
        cols = [x]
        if self.m:
            cols.append(y_std)
        cols.append(np.full((n, 1), float(t)))
        return nn.mlp_forward(self.net, np.concatenate(cols, axis=1))

    def save(self, path):
        doc = {
            "widths": list(self.net.widths),
            "activation": self.net.activation,
            "weights": [w.ravel().tolist() for w in self.net.weights],
            "biases": [b.tolist() for b in self.net.biases],
            "mu_x": self.mu_x.tolist(), "sigma_x": self.sigma_x.tolist(),
            "mu_y": self.mu_y.tolist(), "sigma_y": self.sigma_y.tolist(),
            "bounds": None if self.bounds is None else
                      {"lo": self.bounds.lo.tolist(), "hi": self.bounds.hi.tolist()},
            "x_names": self.x_names, "y_names": self.y_names,
            "meta": self.meta,
        }
        with open(path, "w") as fh:
            json.dump(doc, fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            doc = json.load(fh)
        widths = tuple(doc["widths"])
        weights = [np.asarray(w).reshape(widths[i + 1], widths[i])
                   for i, w in enumerate(doc["weights"])]
        biases = [np.asarray(b) for b in doc["biases"]]
        net = nn.MlpParams(widths=widths, weights=weights, biases=biases,
                           activation=doc["activation"])
        bounds = doc["bounds"]
        return cls(
            net=net,
            mu_x=np.asarray(doc["mu_x"]), sigma_x=np.asarray(doc["sigma_x"]),
            mu_y=np.asarray(doc["mu_y"]), sigma_y=np.asarray(doc["sigma_y"]),
            bounds=None if bounds is None else PriorBox(lo=bounds["lo"], hi=bounds["hi"]),
            x_names=doc["x_names"], y_names=doc["y_names"], meta=doc["meta"],
        )


def make_training_pair(x1, y, rng, t=None):
    """One draw on the linear path: (t, x_t, u_target, y)."""
    x1 = as_vector(np.asarray(x1, dtype=float), "x1")
    t = float(rng.uniform()) if t is None else float(t)
    x0 = rng.standard_normal(x1.shape[0])
    x_t = t * x1 + (1.0 - t) * x0
    return t, x_t, x1 - x0, y


def _training_batch(x1, rng):
    """Vectorized draws for a minibatch of targets."""
    b, d = x1.shape
    t = rng.uniform(size=b)
    x0 = rng.standard_normal((b, d))
    x_t = t[:, None] * x1 + (1.0 - t[:, None]) * x0
    return t, x_t, x1 - x0


@dataclass
class TrainHistory:
    train_loss: list
    val_loss: list
    best_epoch: int
    best_val: float
    stopped_epoch: int


DEFAULT_HYPER = {
    "hidden": (64, 64),
    "lr": 1e-3,
    "batch": 32,
    "epochs": 2000,
    "patience": 500,
    "tol": 1e-4,
    "lr_decay": 0.9999,
    "weight_decay": 0.0,
    "seed": 0,
}


def cfm_train(x_std, y_std, split=None, hyper=None):
    """Train the velocity network on standardized data.

    ``split`` is an optional (train_idx, val_idx) pair; without it all rows
    train and early stopping tracks the training loss. Returns the network
    at the best validation epoch together with the loss history.
    """
    hp = dict(DEFAULT_HYPER)
    hp.update(hyper or {})
    x_std = as_matrix(x_std, "x_std", allow_empty=True)
    if x_std.shape[0] == 0:
        raise EmptyDataset("no training rows")
    y_std = np.zeros((x_std.shape[0], 0)) if y_std is None else \
        as_matrix(y_std, "y_std", allow_empty=True)
    if y_std.shape[0] != x_std.shape[0]:
        raise DimMismatch("x and y row counts differ")
    if hp["epochs"] < 1:
        raise ValueError("epochs must be >= 1")
    d, m = x_std.shape[1], y_std.shape[1]
    if split is None:
        train_idx = np.arange(x_std.shape[0])
        val_idx = None
    else:
        train_idx, val_idx = split
        train_idx = np.asarray(train_idx, dtype=int)
        val_idx = None if val_idx is None or len(val_idx) == 0 else np.asarray(val_idx, dtype=int)
    if train_idx.size == 0:
        raise EmptyDataset("empty training split")

    seeds = np.random.SeedSequence(hp["seed"]).spawn(3)
    rng_batch = np.random.default_rng(seeds[0])
    rng_val = np.random.default_rng(seeds[1])

    params = nn.mlp_init([d + m + 1, *hp["hidden"], d], activation="silu",
                         rng_seed=int(seeds[2].generate_state(1)[0]))
    state = nn.adam_init(params, lr=hp["lr"])
    lr0 = hp["lr"]
    wd = hp["weight_decay"]

    x_tr, y_tr = x_std[train_idx], y_std[train_idx]
    n_tr = x_tr.shape[0]
    batch = max(1, min(hp["batch"], n_tr))

    # fixed validation pairs make the early-stopping signal deterministic
    if val_idx is not None:
        x_va, y_va = x_std[val_idx], y_std[val_idx]
        t_va, xt_va, u_va = _training_batch(x_va, rng_val)
        inp_va = np.concatenate([xt_va, y_va, t_va[:, None]], axis=1)

    best_val = np.inf
    best_params = params.copy()
    best_epoch = 0
    wait = 0
    tr_hist, va_hist = [], []
    epoch = 0
    for epoch in range(1, hp["epochs"] + 1):
        perm = rng_batch.permutation(n_tr)
        epoch_loss = 0.0
        n_batches = 0
        for at in range(0, n_tr, batch):
            idx = perm[at:at + batch]
            x1 = x_tr[idx]
            t, x_t, u = _training_batch(x1, rng_batch)
            inp = np.concatenate([x_t, y_tr[idx], t[:, None]], axis=1)
            pred, cache = nn.mlp_forward_cached(params, inp)
            resid = pred - u
            loss = float(np.mean(np.sum(resid ** 2, axis=1)))
            if not np.isfinite(loss):
                raise DivergedLoss(f"training loss became non-finite at epoch {epoch}")
            grads = nn.mlp_backward(params, cache, 2.0 * resid / idx.shape[0])
            if wd:
                for gw, w in zip(grads.weights, params.weights):
                    gw += wd * w
            params, state = nn.adam_step(state, params, grads)
            epoch_loss += loss
            n_batches += 1
        state.lr = lr0 * hp["lr_decay"] ** epoch
        tr_hist.append(epoch_loss / n_batches)
        if val_idx is not None:
            pred = nn.mlp_forward(params, inp_va)
            monitor = float(np.mean(np.sum((pred - u_va) ** 2, axis=1)))
            va_hist.append(monitor)
        else:
            monitor = tr_hist[-1]
        if monitor < best_val - hp["tol"]:
            best_val = monitor
            best_params = params.copy()
            best_epoch = epoch
            wait = 0
        else:
            wait += 1
            if wait >= hp["patience"]:
                break
    return best_params, TrainHistory(
        train_loss=tr_hist, val_loss=va_hist, best_epoch=best_epoch,
        best_val=float(best_val), stopped_epoch=epoch,
    )


# --- ODE integration -----------------------------------------------------------

def integrate_velocity(u_fn, x0, kind="dopri", steps=100, rtol=1e-6, atol=1e-8):
    """Integrate dx/dt = u(x, t) from t=0 to 1 for a batch of starts.

    ``u_fn(x, t)`` maps an (n, d) batch and scalar t to velocities.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    n, d = x0.shape
    if kind == "rk4":
        h = 1.0 / steps
        x = x0.copy()
        for k in range(steps):
            t = k * h
            k1 = u_fn(x, t)
            k2 = u_fn(x + 0.5 * h * k1, t + 0.5 * h)
            k3 = u_fn(x + 0.5 * h * k2, t + 0.5 * h)
            k4 = u_fn(x + h * k3, t + h)
            x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        return x
    if kind == "dopri":
        def rhs(t, flat):
            return u_fn(flat.reshape(n, d), t).ravel()

        sol = solve_ivp(rhs, (0.0, 1.0), x0.ravel(), method="DOP853",
                        rtol=rtol, atol=atol)
        if not sol.success:
            raise StepFailure(f"adaptive integrator failed: {sol.message}")
        return sol.y[:, -1].reshape(n, d)
    raise ValueError(f"unknown integrator kind {kind!r}")


def ode_integrate(model, y_std, x0, kind="dopri", steps=100, rtol=1e-6, atol=1e-8):
    """Push standardized-space starts through the learned flow."""
    single = np.asarray(x0).ndim == 1
    out = integrate_velocity(
        lambda x, t: model.velocity(x, t, y_std), x0,
        kind=kind, steps=steps, rtol=rtol, atol=atol)
    return out[0] if single else out


@dataclass
class PosteriorResult:
    samples: np.ndarray
    acceptance_rate: float
    n_draws: int


def sample_posterior(model, y_raw, n, bounds=None, max_draws=None, seed=0,
                     kind="dopri", steps=100, rtol=1e-6, atol=1e-8):
    """Draw ``n`` in-bounds posterior samples in raw units.

    Base draws are integrated through the flow, destandardized, and
    rejected when they leave the prior box; drawing repeats until ``n``
    are accepted or the ``max_draws`` budget is spent.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    bounds = model.bounds if bounds is None else bounds
    if bounds is not None and not isinstance(bounds, PriorBox):
        bounds = PriorBox.from_array(np.asarray(bounds, dtype=float))
    y_raw = np.asarray(y_raw, dtype=float).reshape(-1)
    if y_raw.shape[0] != model.m:
        raise DimMismatch(f"conditioning dim {y_raw.shape[0]} != model m {model.m}")
    y_std = (y_raw - model.mu_y) / model.sigma_y if model.m else y_raw
    max_draws = 50 * n if max_draws is None else int(max_draws)
    rng = np.random.default_rng(seed)
    accepted = []
    n_acc = 0
    drawn = 0
    while n_acc < n and drawn < max_draws:
        k = min(max(n - n_acc, 32), max_draws - drawn)
        x0 = rng.standard_normal((k, model.d))
        x_std = ode_integrate(model, y_std, x0, kind=kind, steps=steps,
                              rtol=rtol, atol=atol)
        x_raw = destandardize(x_std, model.mu_x, model.sigma_x)
        keep = bounds.contains(x_raw) if bounds is not None else \
            np.ones(k, dtype=bool)
        accepted.append(x_raw[keep])
        n_acc += int(keep.sum())
        drawn += k
    rate = n_acc / drawn if drawn else 0.0
    if n_acc == 0:
        raise AllRejected(
            f"no draw satisfied the bounds within {drawn} tries")
    if n_acc < n:
        raise RejectionBudgetExceeded(
            f"accepted {n_acc} < {n} requested within {drawn} draws "
            f"(acceptance rate {rate:.3g})")
    samples = np.vstack(accepted)[:n]
    return PosteriorResult(samples=samples, acceptance_rate=rate, n_draws=drawn)


# --- estimator ------------------------------------------------------------------

class CfmEstimator(BaseEstimator):
    """Amortized conditional sampler with a scikit-learn flavored API.

    ``fit(X, Y)`` learns the flow from estimated quantities X conditioned
    on Y (both in raw units); ``sample(y, n)`` draws from the posterior for
    a new conditioning row without retraining.
    """

    def __init__(self, hidden_widths=(64, 64), lr=1e-3, batch_size=32,
                 epochs=2000, patience=500, tol=1e-4, lr_decay=0.9999,
                 weight_decay=0.0, val_fraction=0.25, standardize_data=True,
                 integrator="dopri", ode_steps=100, seed=0):
        self.hidden_widths = hidden_widths
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.patience = patience
        self.tol = tol
        self.lr_decay = lr_decay
        self.weight_decay = weight_decay
        self.val_fraction = val_fraction
        self.standardize_data = standardize_data
        self.integrator = integrator
        self.ode_steps = ode_steps
        self.seed = seed

    def fit(self, X, Y=None, bounds=None, x_names=None, y_names=None):
        X = as_matrix(X, "X")
        n = X.shape[0]
        Y = np.zeros((n, 0)) if Y is None else as_matrix(Y, "Y", allow_empty=True)
        if Y.shape[0] != n:
            raise DimMismatch("X and Y row counts differ")
        rng = np.random.default_rng(self.seed)
        if self.val_fraction > 0 and n >= 4:
            n_val = max(1, int(round(self.val_fraction * n)))
            perm = rng.permutation(n)
            val_idx, train_idx = perm[:n_val], perm[n_val:]
        else:
            train_idx, val_idx = np.arange(n), None
        if self.standardize_data:
            _, mu_x, sigma_x = standardize(X[train_idx])
            if Y.shape[1]:
                _, mu_y, sigma_y = standardize(Y[train_idx])
            else:
                mu_y, sigma_y = np.zeros(0), np.ones(0)
        else:
            mu_x, sigma_x = np.zeros(X.shape[1]), np.ones(X.shape[1])
            mu_y, sigma_y = np.zeros(Y.shape[1]), np.ones(Y.shape[1])
        x_std = (X - mu_x) / sigma_x
        y_std = (Y - mu_y) / sigma_y if Y.shape[1] else Y
        hyper = {
            "hidden": tuple(self.hidden_widths), "lr": self.lr,
            "batch": self.batch_size, "epochs": self.epochs,
            "patience": self.patience, "tol": self.tol,
            "lr_decay": self.lr_decay, "weight_decay": self.weight_decay,
            "seed": self.seed,
        }
        net, history = cfm_train(x_std, y_std, split=(train_idx, val_idx),
                                 hyper=hyper)
        if bounds is not None and not isinstance(bounds, PriorBox):
            bounds = PriorBox.from_array(np.asarray(bounds, dtype=float))
        self.model_ = CfmModel(
            net=net, mu_x=mu_x, sigma_x=sigma_x, mu_y=mu_y, sigma_y=sigma_y,
            bounds=bounds,
            x_names=list(x_names or [f"x{i}" for i in range(X.shape[1])]),
            y_names=list(y_names or [f"y{i}" for i in range(Y.shape[1])]),
            meta={"hyper": {k: (list(v) if isinstance(v, tuple) else v)
                            for k, v in hyper.items()}},
        )
        self.history_ = history
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("CfmEstimator is not fitted")

    def sample_result(self, y, n_samples, seed=0, max_draws=None):
        self._check_fitted()
        return sample_posterior(
            self.model_, np.asarray(y, dtype=float), n_samples,
            max_draws=max_draws, seed=seed, kind=self.integrator,
            steps=self.ode_steps)

    def sample(self, y, n_samples, seed=0, max_draws=None):
        return self.sample_result(y, n_samples, seed=seed,
                                  max_draws=max_draws).samples

    def save(self, path):
        self._check_fitted()
        self.model_.save(path)

    @classmethod
    def from_file(cls, path):
        est = cls()
        est.model_ = CfmModel.load(path)
        return est
