"""Nominal boundary-condition optimization and the MCMC reference sampler.

The six-parameter constrained objective combines relative pressure errors,
a flow-reversal penalty, and a monotonicity penalty on the stenosed-branch
mean flow across a severity continuation, with hard feasibility limits on
capacitances and RC time constants. Optimizers are a classic Nelder-Mead
simplex and a rand/1/bin differential evolution; posterior validation uses
a differential-evolution Markov chain (DE-MC) sampler.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .circuit import MMHG, SimSettings, _Compiled, _Params, _tau_rows, simulate_batch
from .errors import NonPositiveResistance, NumericalFailure
from .validation import as_matrix, as_vector

# objective weights and feasibility limits, surfaced as named constants
PRESSURE_WEIGHT = 1.0
FLOW_REVERSAL_WEIGHT = 1e-4
MONOTONICITY_WEIGHT = 1e-2
SENTINEL_PENALTY = 1e6
CAP_LIMITS = (1e-5, 1e-2)     # capacitance feasibility window [cm^5/dyn]
TAU_LIMITS = (0.05, 10.0)     # distal time constant rd*c window [s]

# parameter vector ordering used throughout the tuner
PARAM_ORDER = ("rp_left", "rd_left", "c_left", "rp_right", "rd_right", "c_right")


@dataclass
class TuningTargets:
    """Clinical targets in mmHg plus optional split/monotonicity context."""

    p_sys: float
    p_dia: float
    flow_split_left: float | None = None
    q_prev_stenosed: float | None = None

    def __post_init__(self):
        if not self.p_sys > self.p_dia > 0:
            raise ValueError(
                f"need p_sys > p_dia > 0, got {self.p_sys}/{self.p_dia}"
            )


@dataclass
class ContinuationState:
    """Previous solution and shrink/grow factors for a severity sweep."""

    theta_prev: np.ndarray
    alpha: float = 0.9
    beta: float = 1.1
    stenosed_side: str = "left"

    def __post_init__(self):
        self.theta_prev = as_vector(self.theta_prev, "theta_prev", dim=6)
        if not 0.0 < self.alpha < 1.0 < self.beta:
            raise ValueError(f"need 0 < alpha < 1 < beta, got {self.alpha}, {self.beta}")
        if self.stenosed_side not in ("left", "right"):
            raise ValueError(f"stenosed_side must be left or right, got {self.stenosed_side}")


@dataclass
class OptimResult:
    x: np.ndarray
    fun: float
    n_iter: int
    converged: bool
    message: str = ""
    history: list = field(default_factory=list)


# --- loss pieces ------------------------------------------------------------

def pressure_loss(p_sys, p_dia, targets):
    """Squared relative pressure errors against the clinical targets."""
    return ((p_sys - targets.p_sys) / targets.p_sys) ** 2 + \
           ((p_dia - targets.p_dia) / targets.p_dia) ** 2


def flow_reversal_loss(t, q_out):
    """Cycle-mean of the squared negative part of each outlet flow, summed."""
    t = np.asarray(t, dtype=float)
    period = t[-1] - t[0]
    total = 0.0
    for q in np.atleast_2d(q_out):
        neg = np.maximum(0.0, -np.asarray(q, dtype=float))
        total += np.trapezoid(neg ** 2, t) / period
    return total


def monotonicity_loss(q_mean_stenosed, q_prev):
    """Squared positive excess of the stenosed-branch mean flow over the previous one."""
    return max(0.0, q_mean_stenosed - q_prev) ** 2


def hard_constraints_ok(x):
    """Capacitance and distal-time-constant feasibility of a 6-vector (or rows)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    c = x[:, [2, 5]]
    tau = x[:, [1, 4]] * c
    ok = np.all((c >= CAP_LIMITS[0]) & (c <= CAP_LIMITS[1]), axis=1)
    ok &= np.all((tau >= TAU_LIMITS[0]) & (tau <= TAU_LIMITS[1]), axis=1)
    return ok


def _rcr_from_params(x):
    """(n, 6) rows in PARAM_ORDER -> (n, 2, 3) [rp, c, rd] outlet triples."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    rcr = np.empty((x.shape[0], 2, 3))
    rcr[:, 0, 0], rcr[:, 0, 1], rcr[:, 0, 2] = x[:, 0], x[:, 2], x[:, 1]
    rcr[:, 1, 0], rcr[:, 1, 1], rcr[:, 1, 2] = x[:, 3], x[:, 5], x[:, 4]
    return rcr


def tuning_objective_batch(x_rows, net, inflow, targets, settings=None):
    """Constrained objective for rows of [rp_l, rd_l, c_l, rp_r, rd_r, c_r].

    Infeasible rows (hard constraints or failed simulations) receive the
    sentinel penalty. Feasible rows are simulated in batches grouped by
    stiffness so a single small time constant does not slow every row down.
    """
    x_rows = as_matrix(x_rows, "x_rows", cols=6)
    settings = settings or SimSettings(strict=False, n_cycles=8)
    n = x_rows.shape[0]
    loss = np.full(n, float(SENTINEL_PENALTY))
    ok = hard_constraints_ok(x_rows) & np.all(x_rows > 0, axis=1)
    if not np.any(ok):
        return loss
    ok_idx = np.flatnonzero(ok)
    rcr_all = _rcr_from_params(x_rows[ok_idx])
    comp = _Compiled(net)
    taus = _tau_rows(comp, _Params(comp, rcr_all.shape[0], rcr=rcr_all))
    sten_idx = 0
    sb = net.stenosis_branch
    if sb is not None and sb.name in net.outlet_names:
        sten_idx = net.outlet_names.index(sb.name)
    # group rows whose stable steps are within a factor of four
    order = np.argsort(taus)
    groups = []
    start = 0
    while start < order.size:
        tau0 = taus[order[start]]
        end = start
        while end < order.size and taus[order[end]] <= 4.0 * tau0:
            end += 1
        groups.append(order[start:end])
        start = end
    for grp in groups:
        dt = min(settings.dt, 0.9 * float(taus[grp].min()))
        run = SimSettings(dt=dt, n_cycles=settings.n_cycles,
                          periodicity_tol=settings.periodicity_tol, strict=False,
                          blowup_guard=settings.blowup_guard)
        try:
            batch = simulate_batch(net, inflow, rcr=rcr_all[grp], settings=run)
        except NumericalFailure:
            continue
        period = batch.t[:, -1] - batch.t[:, 0]
        p_sys = batch.p_in.max(axis=1) / MMHG
        p_dia = batch.p_in.min(axis=1) / MMHG
        neg = np.maximum(0.0, -batch.q_out)
        l_flow = (np.trapezoid(neg ** 2, batch.t[:, None, :], axis=2)
                  / period[:, None]).sum(axis=1)
        q_mean = np.trapezoid(batch.q_out, batch.t[:, None, :], axis=2) / period[:, None]
        vals = PRESSURE_WEIGHT * (((p_sys - targets.p_sys) / targets.p_sys) ** 2
                                  + ((p_dia - targets.p_dia) / targets.p_dia) ** 2)
        vals += FLOW_REVERSAL_WEIGHT * l_flow
        if targets.q_prev_stenosed is not None:
            excess = np.maximum(0.0, q_mean[:, sten_idx] - targets.q_prev_stenosed)
            vals += MONOTONICITY_WEIGHT * excess ** 2
        loss[ok_idx[grp]] = np.where(np.isfinite(vals), vals, SENTINEL_PENALTY)
    return loss


def tuning_objective(x, net, inflow, targets, settings=None):
    """Scalar convenience wrapper over :func:`tuning_objective_batch`."""
    return float(tuning_objective_batch(np.atleast_2d(x), net, inflow, targets,
                                        settings=settings)[0])


def pressure_split_objective(x, net, inflow, targets, case, settings=None,
                             global_bounds=None):
    """Squared relative loss on pressures (and flow split if targeted).

    Used for nominal tuning with Nelder-Mead; ``case`` maps the parameter
    vector to outlet RCR triples. Out-of-bounds points get the sentinel.
    """
    from .circuit import summarize_batch

    x = np.asarray(x, dtype=float)
    if global_bounds is not None:
        gb = np.asarray(global_bounds, dtype=float)
        if np.any(x < gb[:, 0]) or np.any(x > gb[:, 1]):
            return float(SENTINEL_PENALTY)
    if np.any(x <= 0):
        return float(SENTINEL_PENALTY)
    settings = settings or SimSettings(strict=False, n_cycles=12)
    try:
        batch = simulate_batch(net, inflow, rcr=case.to_rcr(x[None, :]),
                               settings=settings)
    except NumericalFailure:
        return float(SENTINEL_PENALTY)
    s = summarize_batch(batch)
    loss = ((s["p_sys"][0] - targets.p_sys) / targets.p_sys) ** 2
    loss += ((s["p_dia"][0] - targets.p_dia) / targets.p_dia) ** 2
    if targets.flow_split_left is not None:
        loss += ((s["flow_split_left"][0] - targets.flow_split_left)
                 / targets.flow_split_left) ** 2
    return float(loss) if np.isfinite(loss) else float(SENTINEL_PENALTY)


# --- continuation bounds ----------------------------------------------------

def continuation_bounds(state, global_bounds):
    """Per-parameter [lo, hi] tightened around the previous solution.

    The stenosed side may only grow (up to ``beta`` times the previous
    value, clamped to the global box; its capacitance keeps the global
    lower limit), while the opposite side may only shrink.
    """
    gb = np.asarray(global_bounds, dtype=float)
    if gb.shape != (6, 2):
        raise ValueError(f"global_bounds must be (6, 2), got {gb.shape}")
    prev = state.theta_prev
    out = np.empty((6, 2))
    left = slice(0, 3)
    right = slice(3, 6)
    grow, shrink = (left, right) if state.stenosed_side == "left" else (right, left)
    for k in range(*grow.indices(6)):
        hi = min(gb[k, 1], state.beta * prev[k])
        if k % 3 == 2:  # capacitance slot keeps the global lower limit
            out[k] = (gb[k, 0], hi)
        else:
            out[k] = (prev[k], hi)
    for k in range(*shrink.indices(6)):
        lo = max(gb[k, 0], state.alpha * prev[k])
        out[k] = (lo, prev[k])
    return out


# --- optimizers -------------------------------------------------------------

def nelder_mead(objective, x0, max_iter=1000, f_tol=1e-8, x_tol=1e-8,
                initial_step=0.05):
    """Minimize with the reflect/expand/contract/shrink simplex method."""
    x0 = as_vector(np.asarray(x0, dtype=float), "x0")
    n = x0.shape[0]
    alpha, gamma, rho, sigma = 1.0, 2.0, 0.5, 0.5
    simplex = [x0.copy()]
    for i in range(n):
        step = initial_step * x0[i] if x0[i] != 0 else initial_step
        x = x0.copy()
        x[i] += step
        simplex.append(x)
    simplex = np.asarray(simplex)
    fvals = np.array([objective(x) for x in simplex])
    if not np.isfinite(fvals[0]):
        raise ValueError("objective not finite at x0")
    n_iter = 0
    while n_iter < max_iter:
        order = np.argsort(fvals, kind="stable")
        simplex, fvals = simplex[order], fvals[order]
        # either tolerance terminates, so a flat objective stops immediately
        if (fvals[-1] - fvals[0] <= f_tol
                or np.max(np.abs(simplex[1:] - simplex[0])) <= x_tol * (
                    1.0 + np.max(np.abs(simplex[0])))):
            return OptimResult(x=simplex[0], fun=float(fvals[0]), n_iter=n_iter,
                               converged=True)
        n_iter += 1
        centroid = simplex[:-1].mean(axis=0)
        xr = centroid + alpha * (centroid - simplex[-1])
        fr = objective(xr)
        if fr < fvals[0]:
            xe = centroid + gamma * (xr - centroid)
            fe = objective(xe)
            if fe < fr:
                simplex[-1], fvals[-1] = xe, fe
            else:
                simplex[-1], fvals[-1] = xr, fr
        elif fr < fvals[-2]:
            simplex[-1], fvals[-1] = xr, fr
        else:
            xc = centroid + rho * (simplex[-1] - centroid)
            fc = objective(xc)
            if fc < fvals[-1]:
                simplex[-1], fvals[-1] = xc, fc
            else:
                for i in range(1, n + 1):
                    simplex[i] = simplex[0] + sigma * (simplex[i] - simplex[0])
                    fvals[i] = objective(simplex[i])
    order = np.argsort(fvals, kind="stable")
    return OptimResult(x=simplex[order[0]], fun=float(fvals[order[0]]),
                       n_iter=n_iter, converged=False,
                       message="max_iter exceeded, best point returned")


def diff_evolution(objective, bounds, pop_size=60, f_weight=0.5, cr=0.9,
                   max_gen=200, seed=0, vectorized=False, f_tol=None):
    """Bounded rand/1/bin differential evolution; seeded and deterministic.

    With ``vectorized=True`` the objective receives the whole population as
    an (n, d) array and must return (n,) losses.
    """
    bounds = np.asarray(bounds, dtype=float)
    if bounds.ndim != 2 or bounds.shape[1] != 2 or np.any(bounds[:, 0] >= bounds[:, 1]):
        raise ValueError("bounds must be (d, 2) with lo < hi")
    d = bounds.shape[0]
    rng = np.random.default_rng(seed)
    pop = rng.uniform(bounds[:, 0], bounds[:, 1], size=(pop_size, d))

    def evaluate(rows):
        if vectorized:
            return np.asarray(objective(rows), dtype=float)
        return np.array([objective(r) for r in rows], dtype=float)

    fvals = evaluate(pop)
    history = []
    for gen in range(max_gen):
        idx = np.arange(pop_size)
        a = np.empty(pop_size, dtype=int)
        b = np.empty(pop_size, dtype=int)
        c = np.empty(pop_size, dtype=int)
        for i in range(pop_size):
            choices = rng.choice(pop_size - 1, size=3, replace=False)
            choices = np.where(choices >= i, choices + 1, choices)
            a[i], b[i], c[i] = choices
        mutant = pop[a] + f_weight * (pop[b] - pop[c])
        mutant = np.clip(mutant, bounds[:, 0], bounds[:, 1])
        cross = rng.random((pop_size, d)) < cr
        cross[idx, rng.integers(0, d, size=pop_size)] = True
        trial = np.where(cross, mutant, pop)
        f_trial = evaluate(trial)
        better = f_trial <= fvals
        pop[better] = trial[better]
        fvals[better] = f_trial[better]
        best = int(np.argmin(fvals))
        history.append((gen, float(fvals[best]), pop[best].copy()))
        if f_tol is not None and fvals[best] <= f_tol:
            return OptimResult(x=pop[best].copy(), fun=float(fvals[best]),
                               n_iter=gen + 1, converged=True, history=history)
    best = int(np.argmin(fvals))
    return OptimResult(x=pop[best].copy(), fun=float(fvals[best]), n_iter=max_gen,
                       converged=f_tol is None, history=history,
                       message="generation budget exhausted, best point returned")


def rescale_resistances(r, r_tot_truth):
    """Scale parallel resistances so their combined total hits the target exactly."""
    r = as_vector(np.asarray(r, dtype=float), "r")
    if np.any(r <= 0):
        raise NonPositiveResistance(f"all resistances must be positive, got {r}")
    if r_tot_truth <= 0:
        raise NonPositiveResistance(f"target total must be positive, got {r_tot_truth}")
    r_tot = 1.0 / np.sum(1.0 / r)
    return r * (r_tot_truth / r_tot)


# --- DE-MC oracle sampler ----------------------------------------------------

@dataclass
class McmcResult:
    samples: np.ndarray        # post-burn-in draws, flattened over chains
    chains: np.ndarray         # (n_gen + 1, n_chains, d) full trajectories
    acceptance_rate: float


def _reflect(x, lo, hi):
    """Fold proposals back into the box (keeps the proposal symmetric)."""
    width = hi - lo
    y = np.mod(x - lo, 2.0 * width)
    y = np.where(y > width, 2.0 * width - y, y)
    return lo + y


def demc_sample(log_posterior, bounds, n_chains=8, n_gen=5000, seed=0,
                gamma=None, jitter=1e-6, burn_frac=0.5, vectorized=False):
    """Differential-evolution Markov chain sampler over a bounded box.

    Proposals are x + gamma*(x_a - x_b) + eps with reflection at the
    bounds and a Metropolis accept on the log posterior. Returns
    post-burn-in samples pooled over chains.
    """
    bounds = np.asarray(bounds, dtype=float)
    d = bounds.shape[0]
    if n_chains < 2 * d + 2:
        raise ValueError(f"need at least {2 * d + 2} chains for dim {d}, got {n_chains}")
    if gamma is None:
        gamma = 2.38 / np.sqrt(2.0 * d)
    rng = np.random.default_rng(seed)
    lo, hi = bounds[:, 0], bounds[:, 1]
    width = hi - lo

    def logp(rows):
        if vectorized:
            return np.asarray(log_posterior(rows), dtype=float)
        return np.array([log_posterior(r) for r in rows], dtype=float)

    x = rng.uniform(lo, hi, size=(n_chains, d))
    lp = logp(x)
    chains = np.empty((n_gen + 1, n_chains, d))
    chains[0] = x
    n_accept = 0
    for gen in range(n_gen):
        a = np.empty(n_chains, dtype=int)
        b = np.empty(n_chains, dtype=int)
        for i in range(n_chains):
            pick = rng.choice(n_chains - 1, size=2, replace=False)
            pick = np.where(pick >= i, pick + 1, pick)
            a[i], b[i] = pick
        eps = rng.normal(scale=jitter, size=(n_chains, d)) * width
        prop = _reflect(x + gamma * (x[a] - x[b]) + eps, lo, hi)
        lp_prop = logp(prop)
        accept = np.log(rng.random(n_chains)) < lp_prop - lp
        x = np.where(accept[:, None], prop, x)
        lp = np.where(accept, lp_prop, lp)
        n_accept += int(accept.sum())
        chains[gen + 1] = x
    burn = int(burn_frac * (n_gen + 1))
    samples = chains[burn:].reshape(-1, d)
    return McmcResult(samples=samples, chains=chains,
                      acceptance_rate=n_accept / (n_gen * n_chains))
