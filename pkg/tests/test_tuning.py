import numpy as np
import pytest
from scipy import stats

from falconbc import tuning
from falconbc.circuit import SimSettings, simulate, summarize
from falconbc.errors import NonPositiveResistance
from falconbc.presets import GLOBAL_BOUNDS_RCR6, desk_inflow, desk_network
from falconbc.tuning import (
    ContinuationState,
    TuningTargets,
    continuation_bounds,
    demc_sample,
    diff_evolution,
    nelder_mead,
    rescale_resistances,
)


class TestNelderMead:
    def test_convex_quadratic(self):
        res = nelder_mead(lambda x: np.sum((x - 3.0) ** 2), np.zeros(3))
        assert res.converged
        assert np.max(np.abs(res.x - 3.0)) < 1e-4

    def test_rosenbrock(self):
        def rosen(x):
            return 100.0 * (x[1] - x[0] ** 2) ** 2 + (1 - x[0]) ** 2

        res = nelder_mead(rosen, np.array([-1.2, 1.0]), max_iter=500)
        assert res.fun < 1e-6

    def test_constant_objective_terminates_quickly(self):
        res = nelder_mead(lambda x: 1.0, np.ones(4))
        assert res.converged
        assert res.n_iter == 0

    def test_budget_exhaustion_returns_best(self):
        res = nelder_mead(lambda x: np.sum(x ** 2), np.full(3, 10.0), max_iter=5)
        assert not res.converged
        assert res.fun <= np.sum(np.full(3, 10.0) ** 2)


class TestDiffEvolution:
    def test_sphere(self):
        res = diff_evolution(lambda x: float(np.sum(x ** 2)),
                             bounds=[(-5, 5)] * 6, pop_size=60, max_gen=200, seed=1)
        assert res.fun < 1e-8

    def test_respects_sentinel_region(self):
        # quadratic with an infeasible half-space carrying a sentinel penalty
        def f(x):
            if x[0] < 0:
                return 1e6
            return float(np.sum((x - 0.5) ** 2))

        res = diff_evolution(f, bounds=[(-2, 2)] * 3, pop_size=30, max_gen=80, seed=3)
        assert res.x[0] >= 0
        assert res.fun < 1e-4

    def test_deterministic_for_fixed_seed(self):
        f = lambda x: float(np.sum(x ** 2))
        r1 = diff_evolution(f, [(-1, 1)] * 2, pop_size=12, max_gen=20, seed=7)
        r2 = diff_evolution(f, [(-1, 1)] * 2, pop_size=12, max_gen=20, seed=7)
        assert np.array_equal(r1.x, r2.x)
        assert [h[1] for h in r1.history] == [h[1] for h in r2.history]

    def test_vectorized_objective(self):
        res = diff_evolution(lambda X: np.sum(X ** 2, axis=1),
                             [(-3, 3)] * 4, pop_size=40, max_gen=100, seed=2,
                             vectorized=True)
        assert res.fun < 1e-6


class TestContinuationBounds:
    GB = GLOBAL_BOUNDS_RCR6

    def test_stenosed_resistance_grows(self):
        prev = np.array([1000.0, 5000.0, 1e-4, 900.0, 4000.0, 2e-4])
        state = ContinuationState(theta_prev=prev, stenosed_side="left")
        out = continuation_bounds(state, self.GB)
        assert out[0, 0] == 1000.0
        assert out[0, 1] == pytest.approx(1100.0)

    def test_upper_clamp_at_global_max(self):
        prev = np.array([1000.0, 1.95e4, 1e-4, 900.0, 4000.0, 2e-4])
        state = ContinuationState(theta_prev=prev, stenosed_side="left")
        out = continuation_bounds(state, self.GB)
        assert out[1, 1] == pytest.approx(2.0e4)

    def test_relaxing_side_shrinks(self):
        prev = np.array([1000.0, 5000.0, 1e-4, 900.0, 4000.0, 1e-3])
        state = ContinuationState(theta_prev=prev, alpha=0.9, stenosed_side="left")
        out = continuation_bounds(state, self.GB)
        assert out[5, 0] == pytest.approx(9e-4)
        assert out[5, 1] == pytest.approx(1e-3)

    def test_stenosed_capacitance_keeps_global_floor(self):
        prev = np.array([1000.0, 5000.0, 1e-4, 900.0, 4000.0, 2e-4])
        out = continuation_bounds(ContinuationState(theta_prev=prev), self.GB)
        assert out[2, 0] == self.GB[2, 0]
        assert out[2, 1] == pytest.approx(1.1e-4)

    def test_right_side_roles_swap(self):
        prev = np.array([1000.0, 5000.0, 1e-4, 900.0, 4000.0, 2e-4])
        out = continuation_bounds(
            ContinuationState(theta_prev=prev, stenosed_side="right"), self.GB)
        assert out[3, 0] == 900.0
        assert out[0, 1] == 1000.0

    def test_always_inside_global_box(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            prev = rng.uniform(self.GB[:, 0], self.GB[:, 1])
            side = "left" if rng.random() < 0.5 else "right"
            out = continuation_bounds(
                ContinuationState(theta_prev=prev, stenosed_side=side), self.GB)
            assert np.all(out[:, 0] >= self.GB[:, 0] - 1e-12)
            assert np.all(out[:, 1] <= self.GB[:, 1] + 1e-12)
            assert np.all(out[:, 0] <= out[:, 1] + 1e-15)


class TestObjective:
    def test_zero_at_exact_targets(self):
        net = desk_network()
        nominal = np.array([281.2, 4308.0, 1.775e-4, 233.2, 3126.0, 3.161e-4])
        s = summarize(simulate(net, desk_inflow()))
        targets = TuningTargets(p_sys=s.p_sys, p_dia=s.p_dia,
                                q_prev_stenosed=s.q_mean[0] + 1.0)
        val = tuning.tuning_objective(nominal, net, desk_inflow(), targets)
        assert val == pytest.approx(0.0, abs=1e-5)

    def test_tau_constraint_violation_hits_sentinel(self):
        net = desk_network()
        x = np.array([300.0, 1000.0, 1e-5, 233.2, 3126.0, 3.161e-4])  # tau=0.01
        targets = TuningTargets(p_sys=120.0, p_dia=80.0)
        assert tuning.tuning_objective(x, net, desk_inflow(), targets) == \
            tuning.SENTINEL_PENALTY

    def test_capacitance_window(self):
        ok = tuning.hard_constraints_ok(
            np.array([300.0, 1500.0, 5e-3, 300.0, 4000.0, 2e-4]))
        too_big = tuning.hard_constraints_ok(
            np.array([300.0, 1500.0, 2e-2, 300.0, 4000.0, 2e-4]))
        tau_too_big = tuning.hard_constraints_ok(
            np.array([300.0, 4000.0, 5e-3, 300.0, 4000.0, 2e-4]))
        assert ok[0] and not too_big[0] and not tau_too_big[0]

    def test_flow_reversal_hand_value(self):
        t = np.linspace(0.0, 1.0, 20001)
        q_neg = np.where(t < 0.5, -1.0, 0.0)
        q_pos = np.ones_like(t)
        val = tuning.flow_reversal_loss(t, np.vstack([q_pos, q_neg]))
        assert val == pytest.approx(0.5, rel=1e-3)
        assert tuning.FLOW_REVERSAL_WEIGHT * val == pytest.approx(5e-5, rel=1e-3)

    def test_weights_are_pinned(self):
        assert tuning.PRESSURE_WEIGHT == 1.0
        assert tuning.FLOW_REVERSAL_WEIGHT == 1e-4
        assert tuning.MONOTONICITY_WEIGHT == 1e-2

    def test_monotonicity_penalty(self):
        assert tuning.monotonicity_loss(5.0, 6.0) == 0.0
        assert tuning.monotonicity_loss(7.0, 6.0) == pytest.approx(1.0)


class TestRescale:
    def test_already_at_target(self):
        out = rescale_resistances([2.0, 2.0], 1.0)
        assert np.allclose(out, [2.0, 2.0])

    def test_linear_scaling(self):
        out = rescale_resistances([4.0, 4.0], 1.0)
        assert np.allclose(out, [2.0, 2.0])

    def test_zero_entry_rejected(self):
        with pytest.raises(NonPositiveResistance):
            rescale_resistances([1.0, 0.0], 1.0)

    def test_idempotent(self):
        rng = np.random.default_rng(5)
        r = rng.uniform(0.5, 50.0, size=7)
        once = rescale_resistances(r, 3.7)
        twice = rescale_resistances(once, 3.7)
        assert np.allclose(once, twice, rtol=1e-12)

    def test_total_matches_target(self):
        rng = np.random.default_rng(6)
        r = rng.uniform(0.1, 100.0, size=14)
        out = rescale_resistances(r, 2.5)
        r_tot = 1.0 / np.sum(1.0 / out)
        assert abs(r_tot - 2.5) / 2.5 < 1e-12


class TestDemc:
    def test_gaussian_moments(self):
        mu = np.array([1.0, -2.0])
        sigma = np.array([0.5, 1.5])

        def logp(rows):
            rows = np.atleast_2d(rows)
            return -0.5 * np.sum(((rows - mu) / sigma) ** 2, axis=1)

        res = demc_sample(logp, bounds=[(-9, 9), (-12, 8)], n_chains=8,
                          n_gen=5000, seed=11, vectorized=True)
        got_mu = res.samples.mean(axis=0)
        got_sd = res.samples.std(axis=0)
        assert np.all(np.abs(got_mu - mu) < 0.05 * np.maximum(np.abs(mu), sigma))
        assert np.all(np.abs(got_sd - sigma) / sigma < 0.05)

    def test_flat_posterior_is_uniform(self):
        res = demc_sample(lambda rows: np.zeros(np.atleast_2d(rows).shape[0]),
                          bounds=[(2.0, 5.0)], n_chains=8, n_gen=2500, seed=4,
                          vectorized=True)
        sub = res.samples[::4, 0]
        ks = stats.kstest(sub, stats.uniform(loc=2.0, scale=3.0).cdf)
        assert ks.statistic < 0.05

    def test_deterministic(self):
        logp = lambda rows: -0.5 * np.sum(np.atleast_2d(rows) ** 2, axis=1)
        r1 = demc_sample(logp, [(-3, 3)], n_chains=6, n_gen=200, seed=9,
                         vectorized=True)
        r2 = demc_sample(logp, [(-3, 3)], n_chains=6, n_gen=200, seed=9,
                         vectorized=True)
        assert np.array_equal(r1.chains, r2.chains)

    def test_detailed_balance_on_flat_target(self):
        # on a flat target every proposal is accepted; binned transition
        # counts between box halves must be symmetric within MC error
        res = demc_sample(lambda rows: np.zeros(np.atleast_2d(rows).shape[0]),
                          bounds=[(0.0, 1.0)], n_chains=8, n_gen=4000, seed=21,
                          vectorized=True, burn_frac=0.25)
        chains = res.chains[1000:]
        states = (chains[:, :, 0] > 0.5).astype(int)
        a, b = states[:-1].ravel(), states[1:].ravel()
        n01 = int(np.sum((a == 0) & (b == 1)))
        n10 = int(np.sum((a == 1) & (b == 0)))
        assert abs(n01 - n10) / max(n01 + n10, 1) < 0.05

    def test_chain_count_precondition(self):
        with pytest.raises(ValueError):
            demc_sample(lambda r: 0.0, [(-1, 1)] * 3, n_chains=4, n_gen=10)
