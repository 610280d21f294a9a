"""Dataset generation, noise, standardization, splits, and error metrics.

The workflow: sample boundary conditions uniformly around their nominal
values, push them through the 0D solver, summarize each run into clinical
targets, corrupt the targets with heteroskedastic Gaussian noise, and
store everything as a column-typed table (boundary block B, target block
C, optional per-geometry latent block Z joined by a group key). Metrics
compare posterior-predictive re-simulations against the conditioning
targets with absolute and signed means over test points.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .circuit import SimSettings, _Compiled, _Params, _tau_rows, simulate_batch, summarize_batch
from .errors import (
    EmptyDataset,
    InvalidFractions,
    MissingColumnSpec,
    NonPositiveNominal,
    ShapeMismatch,
    ZeroVariance,
)
from .validation import as_matrix


def config_hash(doc):
    """Stable short hash of a JSON-serializable config document."""
    canon = json.dumps(doc, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


# --- prior sampling and noise ------------------------------------------------

def sample_prior(nominal, rel_range, n, seed):
    """Uniform box [(1-rel_range), (1+rel_range)] * nominal, independent columns."""
    nominal = np.asarray(nominal, dtype=float)
    if np.any(nominal <= 0):
        raise NonPositiveNominal(f"nominal values must be positive, got {nominal}")
    rng = np.random.default_rng(seed)
    lo = (1.0 - rel_range) * nominal
    hi = (1.0 + rel_range) * nominal
    return rng.uniform(lo, hi, size=(n, nominal.shape[0]))


def prior_box(nominal, rel_range=0.3):
    """(d, 2) bounds of the sampling box."""
    nominal = np.asarray(nominal, dtype=float)
    return np.column_stack([(1.0 - rel_range) * nominal, (1.0 + rel_range) * nominal])


@dataclass
class NoiseSpec:
    """Per-column relative noise levels; std of a cell is rel * |value|."""

    rel_std: dict
    seed: int = 0

    def __post_init__(self):
        for name, rel in self.rel_std.items():
            if rel < 0:
                raise ValueError(f"noise level for {name!r} must be >= 0, got {rel}")


def add_noise(block, column_names, spec):
    """Add zero-mean Gaussian noise with per-cell std rel*|value|."""
    block = as_matrix(block, "targets")
    if block.shape[1] != len(column_names):
        raise ShapeMismatch(
            f"block has {block.shape[1]} columns but {len(column_names)} names given")
    missing = [c for c in column_names if c not in spec.rel_std]
    if missing:
        raise MissingColumnSpec(f"noise spec missing columns: {missing}")
    rng = np.random.default_rng(spec.seed)
    rel = np.array([spec.rel_std[c] for c in column_names])
    return block + rng.normal(size=block.shape) * rel[None, :] * np.abs(block)


# --- standardization ----------------------------------------------------------

def standardize(block):
    """Columnwise (v - mu) / sigma; returns (standardized, mu, sigma)."""
    block = as_matrix(block, "block", allow_empty=False)
    mu = block.mean(axis=0)
    sigma = block.std(axis=0)
    if np.any(sigma <= 0):
        bad = np.flatnonzero(sigma <= 0).tolist()
        raise ZeroVariance(f"columns {bad} are constant and cannot be standardized")
    return (block - mu) / sigma, mu, sigma


def destandardize(block, mu, sigma):
    return np.asarray(block, dtype=float) * sigma + mu


class Standardizer(TransformerMixin, BaseEstimator):
    """Columnwise standardization with stats learned on the fitted data."""

    def fit(self, X, y=None):
        _, self.mu_, self.sigma_ = standardize(X)
        return self

    def transform(self, X):
        if not hasattr(self, "mu_"):
            raise NotFittedError("Standardizer is not fitted")
        return (as_matrix(X, "X", cols=self.mu_.shape[0]) - self.mu_) / self.sigma_

    def inverse_transform(self, X):
        if not hasattr(self, "mu_"):
            raise NotFittedError("Standardizer is not fitted")
        return destandardize(X, self.mu_, self.sigma_)


# --- splits -------------------------------------------------------------------

def split(n, fractions, seed=0):
    """Seeded disjoint exhaustive partition of range(n) by fractions."""
    fractions = [float(f) for f in fractions]
    if any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise InvalidFractions(f"fractions must be positive and sum to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    counts = [int(round(f * n)) for f in fractions]
    counts[-1] = n - sum(counts[:-1])
    if any(c < 0 for c in counts):
        raise InvalidFractions(f"fractions {fractions} leave an empty partition for n={n}")
    parts = []
    at = 0
    for c in counts:
        parts.append(np.sort(perm[at:at + c]))
        at += c
    return parts


def group_kfold(groups, k, seed=0):
    """K train/val index pairs partitioning whole groups, never rows of one group."""
    groups = np.asarray(groups)
    uniq = np.unique(groups)
    if k < 2 or k > uniq.size:
        raise InvalidFractions(f"k must be in [2, {uniq.size}], got {k}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(uniq)
    folds = np.array_split(perm, k)
    out = []
    for fold in folds:
        val_mask = np.isin(groups, fold)
        out.append((np.flatnonzero(~val_mask), np.flatnonzero(val_mask)))
    return out


def kfold_summary(losses):
    """Mean and sample standard deviation of per-fold best losses."""
    losses = np.asarray(losses, dtype=float)
    return float(losses.mean()), float(losses.std(ddof=1))


# --- reconstruction metrics ----------------------------------------------------

@dataclass
class TargetMetrics:
    name: str
    abs_mean: float
    abs_std: float
    sign_mean: float
    sign_std: float
    rel_abs_mean: float
    rel_abs_std: float
    rel_sign_mean: float
    rel_sign_std: float
    n_missing: int = 0


@dataclass
class MetricsReport:
    targets: list
    n_test: int
    n_samples: int

    def by_name(self, name):
        for t in self.targets:
            if t.name == name:
                return t
        raise KeyError(name)

    def to_dict(self):
        return {
            "n_test": self.n_test,
            "n_samples": self.n_samples,
            "targets": [vars(t) for t in self.targets],
        }

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def reconstruction_metrics(predicted, truth, target_names=None):
    """Absolute/signed reconstruction errors, inner mean over samples,
    outer mean/std over test points; relative variants divide per-sample
    differences by the truth (signed) or its magnitude (absolute).

    ``predicted`` is (n_test, n_samples, m); ``truth`` is (n_test, m).
    Relative cells with zero truth are reported as missing per target and
    excluded from the relative aggregates.
    """
    predicted = np.asarray(predicted, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if predicted.ndim != 3 or truth.ndim != 2 or predicted.shape[::2] != truth.shape:
        raise ShapeMismatch(
            f"predicted {predicted.shape} incompatible with truth {truth.shape}")
    n_test, n_s, m = predicted.shape
    names = target_names or [f"target_{i}" for i in range(m)]
    diff = predicted - truth[:, None, :]
    eps_abs = np.abs(diff).mean(axis=1)   # (n_test, m)
    eps_sign = diff.mean(axis=1)
    zero = truth == 0.0
    safe = np.where(zero, np.nan, truth)
    rel_abs = (np.abs(diff) / np.abs(safe[:, None, :])).mean(axis=1)
    rel_sign = (diff / safe[:, None, :]).mean(axis=1)
    out = []
    for i in range(m):
        miss = int(zero[:, i].sum())
        keep = ~zero[:, i]
        rel_a = rel_abs[keep, i]
        rel_s = rel_sign[keep, i]
        out.append(TargetMetrics(
            name=names[i],
            abs_mean=float(eps_abs[:, i].mean()),
            abs_std=float(eps_abs[:, i].std()),
            sign_mean=float(eps_sign[:, i].mean()),
            sign_std=float(eps_sign[:, i].std()),
            rel_abs_mean=float(rel_a.mean()) if rel_a.size else float("nan"),
            rel_abs_std=float(rel_a.std()) if rel_a.size else float("nan"),
            rel_sign_mean=float(rel_s.mean()) if rel_s.size else float("nan"),
            rel_sign_std=float(rel_s.std()) if rel_s.size else float("nan"),
            n_missing=miss,
        ))
    return MetricsReport(targets=out, n_test=n_test, n_samples=n_s)


# --- dataset table --------------------------------------------------------------

@dataclass
class DatasetTable:
    """{B, C, Z} blocks; Z is stored per group and joined through group_id."""

    b: np.ndarray
    c: np.ndarray
    b_names: list
    c_names: list
    z: np.ndarray = None
    z_names: list = field(default_factory=list)
    group_id: np.ndarray = None
    units: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.b = as_matrix(self.b, "B")
        self.c = as_matrix(self.c, "C")
        if self.b.shape[0] != self.c.shape[0]:
            raise ShapeMismatch(
                f"B has {self.b.shape[0]} rows, C has {self.c.shape[0]}")
        if self.z is not None:
            self.z = as_matrix(self.z, "Z")
            if self.group_id is None:
                raise ShapeMismatch("Z block requires a group_id column")
            self.group_id = np.asarray(self.group_id, dtype=int)
            if self.group_id.shape[0] != self.b.shape[0]:
                raise ShapeMismatch("group_id length must match row count")
            if self.group_id.min() < 0 or self.group_id.max() >= self.z.shape[0]:
                raise ShapeMismatch("group_id out of range for the Z block")

    @property
    def n_rows(self):
        return self.b.shape[0]

    def z_rows(self):
        """Materialize the per-row latent block via the group join."""
        if self.z is None:
            return None
        return self.z[self.group_id]

    def block(self, which):
        if which == "B":
            return self.b, list(self.b_names)
        if which == "C":
            return self.c, list(self.c_names)
        if which == "Z":
            if self.z is None:
                raise KeyError("table has no Z block")
            return self.z_rows(), list(self.z_names)
        raise KeyError(which)

    def subset(self, idx):
        return DatasetTable(
            b=self.b[idx], c=self.c[idx], b_names=self.b_names, c_names=self.c_names,
            z=self.z, z_names=self.z_names,
            group_id=None if self.group_id is None else self.group_id[idx],
            units=dict(self.units), meta=dict(self.meta),
        )

    def save(self, prefix):
        """Write <prefix>.csv plus a <prefix>.json sidecar with schema and provenance."""
        header = [f"B:{n}" for n in self.b_names] + [f"C:{n}" for n in self.c_names]
        cols = [self.b, self.c]
        if self.group_id is not None:
            header.append("group")
            cols.append(self.group_id[:, None].astype(float))
        data = np.hstack(cols)
        path_csv = f"{prefix}.csv"
        with open(path_csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for row in data:
                writer.writerow([repr(float(v)) for v in row])
        sidecar = {
            "b_names": list(self.b_names),
            "c_names": list(self.c_names),
            "z_names": list(self.z_names),
            "z": None if self.z is None else self.z.tolist(),
            "units": self.units,
            "meta": self.meta,
        }
        with open(f"{prefix}.json", "w") as fh:
            json.dump(sidecar, fh, indent=2)
        return path_csv

    @classmethod
    def load(cls, prefix):
        with open(f"{prefix}.json") as fh:
            sidecar = json.load(fh)
        with open(f"{prefix}.csv", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [[float(v) for v in row] for row in reader]
        data = np.asarray(rows)
        nb = len(sidecar["b_names"])
        nc = len(sidecar["c_names"])
        group_id = None
        if "group" in header:
            group_id = data[:, header.index("group")].astype(int)
        z = None if sidecar["z"] is None else np.asarray(sidecar["z"])
        return cls(
            b=data[:, :nb], c=data[:, nb:nb + nc],
            b_names=sidecar["b_names"], c_names=sidecar["c_names"],
            z=z, z_names=sidecar["z_names"], group_id=group_id,
            units=sidecar.get("units", {}), meta=sidecar.get("meta", {}),
        )


def partition_xy(table, estimate=("B",), condition=("C",)):
    """Partition table blocks into estimated X and conditioning Y arrays.

    Returns (x, x_names, y, y_names); Y may have zero columns for
    unconditional estimation.
    """
    def gather(blocks):
        arrs, names = [], []
        for blk in blocks:
            a, n = table.block(blk)
            arrs.append(a)
            names.extend(f"{blk}:{v}" for v in n)
        if not arrs:
            return np.zeros((table.n_rows, 0)), []
        return np.hstack(arrs), names

    x, x_names = gather(estimate)
    y, y_names = gather(condition)
    return x, x_names, y, y_names


# --- dataset generation ----------------------------------------------------------

def simulate_targets(net, inflow, rcr, target_names, settings=None, stenosis=None):
    """Batch-simulate parameter rows and collect the named summary columns."""
    settings = settings or SimSettings(strict=False, n_cycles=10)
    comp = _Compiled(net)
    n = rcr.shape[0]
    taus = _tau_rows(comp, _Params(comp, n, rcr=rcr,
                                   stenosis=None if stenosis is None else stenosis))
    dt = min(settings.dt, 0.9 * float(taus.min()))
    run = SimSettings(dt=dt, n_cycles=settings.n_cycles,
                      periodicity_tol=settings.periodicity_tol,
                      strict=settings.strict, blowup_guard=settings.blowup_guard)
    batch = simulate_batch(net, inflow, rcr=rcr, stenosis=stenosis, settings=run)
    summary = summarize_batch(batch)
    cols = []
    for name in target_names:
        if name == "P_dia":
            cols.append(summary["p_dia"])
        elif name == "P_sys":
            cols.append(summary["p_sys"])
        elif name == "flow_split_left":
            cols.append(summary["flow_split_left"])
        elif name.startswith("Q_mean_"):
            outlet = name[len("Q_mean_"):]
            matches = [i for i, o in enumerate(batch.outlet_names) if outlet in o]
            if not matches:
                raise KeyError(f"no outlet matching {name!r}")
            cols.append(summary["q_mean"][:, matches[0]])
        else:
            raise KeyError(f"unknown target column {name!r}")
    return np.column_stack(cols)


TARGET_UNITS = {"P_dia": "mmHg", "P_sys": "mmHg", "Q_mean_left": "cm3/s",
                "Q_mean_right": "cm3/s", "flow_split_left": "%"}


def gen_dataset(case, net, inflow, n, seed, noise_rel=None, rel_range=0.3,
                settings=None, meta=None):
    """Sample the prior, simulate, summarize, and add measurement noise."""
    from .presets import DEFAULT_NOISE

    if n < 1:
        raise EmptyDataset("need at least one row")
    noise_rel = dict(DEFAULT_NOISE if noise_rel is None else noise_rel)
    b = sample_prior(case.nominal, rel_range, n, seed)
    target_names = list(case.target_names)
    c_clean = simulate_targets(net, inflow, case.to_rcr(b), target_names,
                               settings=settings)
    spec = NoiseSpec({k: noise_rel[k] for k in target_names}, seed=seed + 1)
    c = add_noise(c_clean, target_names, spec)
    units = dict(zip(case.param_names, case.units))
    units.update({k: TARGET_UNITS.get(k, "") for k in target_names})
    table_meta = {"case": case.name, "seed": seed, "n": n, "rel_range": rel_range,
                  "noise": {k: noise_rel[k] for k in target_names}}
    table_meta.update(meta or {})
    return DatasetTable(
        b=b, c=c, b_names=list(case.param_names), c_names=target_names,
        units=units, meta=table_meta,
    )


# --- hyperparameter search ----------------------------------------------------

SEARCH_BOUNDS = {
    "layers": (1, 4),
    "neurons": (1, 128),
    "lr": (1e-4, 1e-2),      # log-uniform
    "batch_small": (8, 64),   # dataset size <= 100
    "batch_large": (16, 128),
}


def sample_hyperparameters(rng, n_data):
    lo, hi = SEARCH_BOUNDS["batch_small"] if n_data <= 100 else SEARCH_BOUNDS["batch_large"]
    return {
        "layers": int(rng.integers(SEARCH_BOUNDS["layers"][0],
                                   SEARCH_BOUNDS["layers"][1] + 1)),
        "neurons": int(rng.integers(SEARCH_BOUNDS["neurons"][0],
                                    SEARCH_BOUNDS["neurons"][1] + 1)),
        "lr": float(np.exp(rng.uniform(np.log(SEARCH_BOUNDS["lr"][0]),
                                       np.log(SEARCH_BOUNDS["lr"][1])))),
        "batch": int(rng.integers(lo, hi + 1)),
    }


def random_search(eval_fn, n_trials, n_data, seed=0):
    """Bounded random hyperparameter search; returns (best_trial, log).

    ``eval_fn`` maps a hyperparameter dict to a validation loss; every
    trial dict carries its sampled values and resulting loss.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    rng = np.random.default_rng(seed)
    log = []
    best = None
    for k in range(n_trials):
        params = sample_hyperparameters(rng, n_data)
        loss = float(eval_fn(params))
        entry = dict(params, loss=loss, trial=k)
        log.append(entry)
        if best is None or (np.isfinite(loss) and loss < best["loss"]):
            best = entry
    return best, log
