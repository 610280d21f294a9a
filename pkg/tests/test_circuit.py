import numpy as np
import pytest

from falconbc import circuit
from falconbc.circuit import (
    MMHG,
    SimSettings,
    StenosisElement,
    build_network,
    simulate,
    simulate_batch,
    stenosis_dp,
    summarize,
    summarize_batch,
)
from falconbc.errors import (
    EmptyTrace,
    InvalidTopology,
    NonConvergent,
    NumericalBlowup,
    UnstableTimestep,
)
from falconbc.inflow import FourierInflow
from falconbc.presets import desk_inflow, desk_network


def single_outlet_config(rp=100.0, rd=900.0, c=1e-4, p_ref=0.0, segments=()):
    return {
        "name": "single",
        "branches": [{
            "name": "trunk", "parent": None,
            "segments": list(segments),
            "outlet": {"rp": rp, "c": c, "rd": rd, "p_ref": p_ref},
        }],
    }


def symmetric_config():
    seg = {"r": 60.0, "c": 1e-4, "l": 0.0}
    out = {"rp": 200.0, "c": 2e-4, "rd": 1800.0, "p_ref": 0.0}
    return {
        "name": "sym",
        "branches": [
            {"name": "root", "parent": None, "segments": [dict(seg)]},
            {"name": "left", "parent": "root", "segments": [dict(seg)], "outlet": dict(out)},
            {"name": "right", "parent": "root", "segments": [dict(seg)], "outlet": dict(out)},
        ],
    }


def constant_inflow(q, period=1.0):
    return FourierInflow(period=period, mean=q)


class TestBuildNetwork:
    def test_single_branch(self):
        net = build_network(single_outlet_config())
        assert len(net.branches) == 1
        assert net.outlet_names == ["trunk"]

    def test_stenosis_attaches_to_tagged_branch(self):
        net = desk_network("B", severity=0.667)
        sb = net.stenosis_branch
        assert sb.name == "left_iliac"
        assert sb.stenosis_site == "B"
        assert sb.stenosis.s_quad > 0

    def test_negative_capacitance_rejected(self):
        cfg = single_outlet_config(c=-1.0)
        with pytest.raises(InvalidTopology):
            build_network(cfg)

    def test_forward_parent_reference_rejected(self):
        cfg = {
            "branches": [
                {"name": "a", "parent": "b",
                 "segments": [{"r": 1, "c": 1e-4}]},
                {"name": "b", "parent": None, "segments": [{"r": 1, "c": 1e-4}],
                 "outlet": {"rp": 1, "c": 1e-4, "rd": 1}},
            ]
        }
        with pytest.raises(InvalidTopology):
            build_network(cfg)

    def test_leaf_without_outlet_rejected(self):
        cfg = {"branches": [{"name": "a", "parent": None,
                             "segments": [{"r": 1, "c": 1e-4}]}]}
        with pytest.raises(InvalidTopology):
            build_network(cfg)

    def test_interior_outlet_rejected(self):
        cfg = symmetric_config()
        cfg["branches"][0]["outlet"] = {"rp": 1, "c": 1e-4, "rd": 1}
        with pytest.raises(InvalidTopology):
            build_network(cfg)


class TestStenosisDp:
    def test_zero_flow(self):
        assert stenosis_dp(0.0, StenosisElement(10.0, 2.0)) == 0.0

    def test_direct_formula(self):
        assert stenosis_dp(3.0, StenosisElement(10.0, 2.0)) == pytest.approx(48.0)

    def test_odd_symmetry(self):
        s = StenosisElement(10.0, 2.0)
        assert stenosis_dp(-3.0, s) == pytest.approx(-48.0)

    def test_severity_closure_monotone(self):
        s_lo = circuit.stenosis_from_severity(0.3, area_ref=1.0)
        s_hi = circuit.stenosis_from_severity(0.7, area_ref=1.0)
        assert 0 < s_lo.s_quad < s_hi.s_quad
        assert circuit.stenosis_from_severity(0.0, 1.0).s_quad == 0.0


class TestSimulate:
    def test_constant_inflow_steady_state(self):
        net = build_network(single_outlet_config(rp=100.0, rd=900.0, c=1e-4))
        tr = simulate(net, constant_inflow(1.0), SimSettings(dt=2e-3))
        steady = 1.0 * (100.0 + 900.0)
        assert abs(tr.p_in[-1] - steady) / steady < 1e-3

    def test_zero_inflow_decays_to_reference(self):
        net = build_network(single_outlet_config(p_ref=500.0))
        start = np.array([2000.0])
        tr = simulate(net, constant_inflow(0.0), SimSettings(n_cycles=60, dt=2e-3),
                      initial_state=start)
        assert tr.p_in[-1] == pytest.approx(500.0, abs=1.0)
        assert tr.p_out[0][-1] == pytest.approx(500.0, abs=1.0)

    def test_symmetric_network_splits_evenly(self):
        net = build_network(symmetric_config())
        tr = simulate(net, desk_inflow(), SimSettings(dt=1e-3))
        s = summarize(tr)
        assert s.flow_split_left == pytest.approx(50.0, abs=0.1)

    def test_mass_conservation(self):
        inflow = desk_inflow()
        s = summarize(simulate(desk_network(), inflow))
        assert abs(inflow.mean - s.q_mean.sum()) / inflow.mean < 1e-3

    def test_pure_resistive_limit_tracks_inflow(self):
        from falconbc.inflow import eval_fourier

        seg = {"r": 100.0, "c": 8e-7, "l": 0.0}
        net = build_network(single_outlet_config(
            rp=100.0, rd=900.0, c=8e-7, p_ref=1000.0, segments=[seg]))
        cos = np.zeros(9)
        sin = np.zeros(9)
        cos[0], sin[1] = 30.0, 15.0
        inflow = FourierInflow(period=1.0, mean=62.0, cos_coeffs=cos, sin_coeffs=sin)
        tr = simulate(net, inflow, SimSettings(dt=3.5e-5))
        r_total = 100.0 + 100.0 + 900.0
        expected = eval_fourier(inflow, tr.t) * r_total + 1000.0
        scale = np.max(np.abs(expected))
        assert np.max(np.abs(tr.p_in - expected)) / scale < 0.01

    def test_outlet_decay_time_constant(self):
        rd, c = 1200.0, 3e-4
        net = build_network(single_outlet_config(rp=150.0, rd=rd, c=c))
        warm = simulate(net, desk_inflow(), SimSettings(dt=2e-3))
        tr = simulate(net, constant_inflow(0.0), SimSettings(dt=2e-3, n_cycles=2,
                                                             strict=False),
                      initial_state=warm.final_state)
        p = tr.p_out[0]
        mask = p > 1e-6
        slope = np.polyfit(tr.t[mask], np.log(p[mask]), 1)[0]
        assert -1.0 / slope == pytest.approx(rd * c, rel=0.02)

    def test_grid_refinement(self):
        net = desk_network()
        s1 = summarize(simulate(net, desk_inflow(), SimSettings(dt=2e-3)))
        s2 = summarize(simulate(net, desk_inflow(), SimSettings(dt=1e-3)))
        assert abs(s1.p_sys - s2.p_sys) / s2.p_sys < 1e-3
        assert abs(s1.p_dia - s2.p_dia) / s2.p_dia < 1e-3

    def test_stenosis_weakly_reduces_branch_flow(self):
        inflow = desk_inflow()
        flows = []
        for severity in (0.0, 0.4, 0.6, 0.75):
            net = desk_network("B", severity=severity) if severity else desk_network()
            s = summarize(simulate(net, inflow, SimSettings(strict=False)))
            flows.append(s.q_mean[0])
        assert all(b <= a + 1e-12 for a, b in zip(flows, flows[1:]))

    def test_nonconvergent_raises_in_strict_mode(self):
        net = build_network(single_outlet_config(rp=100.0, rd=5000.0, c=2e-3))
        with pytest.raises(NonConvergent):
            simulate(net, desk_inflow(), SimSettings(n_cycles=3, dt=2e-3),
                     initial_state=np.array([0.0]))

    def test_unstable_timestep_rejected(self):
        net = build_network(single_outlet_config(c=1e-6))
        with pytest.raises(UnstableTimestep):
            simulate(net, desk_inflow(), SimSettings(dt=5e-3))

    def test_blowup_guard(self):
        net = build_network(single_outlet_config(c=1e-6))
        with pytest.raises(NumericalBlowup):
            simulate(net, desk_inflow(),
                     SimSettings(dt=5e-3, check_stability=False, strict=False))

    def test_coarse_dt_precondition(self):
        net = desk_network()
        with pytest.raises(ValueError):
            simulate(net, desk_inflow(), SimSettings(dt=0.02))

    def test_inductive_segment_matches_small_l_limit(self):
        seg_l0 = {"r": 80.0, "c": 4e-4, "l": 0.0}
        seg_l = {"r": 80.0, "c": 4e-4, "l": 0.2}
        base = single_outlet_config(segments=[dict(seg_l0), dict(seg_l0)])
        with_l = single_outlet_config(segments=[dict(seg_l), dict(seg_l)])
        tr0 = simulate(build_network(base), desk_inflow(), SimSettings(dt=5e-4))
        tr1 = simulate(build_network(with_l), desk_inflow(), SimSettings(dt=5e-4))
        scale = np.max(np.abs(tr0.p_in))
        assert np.max(np.abs(tr0.p_in - tr1.p_in)) / scale < 0.01


class TestBatch:
    def test_batch_matches_single_runs(self):
        net = desk_network()
        rng = np.random.default_rng(0)
        base = np.array([[281.2, 1.775e-4, 4308.0], [233.2, 3.161e-4, 3126.0]])
        rcr = base[None] * rng.uniform(0.8, 1.2, size=(3, 2, 3))
        batch = simulate_batch(net, desk_inflow(), rcr=rcr)
        out = summarize_batch(batch)
        for i in range(3):
            si = summarize(batch.row(i))
            assert out["p_sys"][i] == pytest.approx(si.p_sys)
            assert out["flow_split_left"][i] == pytest.approx(si.flow_split_left)
        # independent single-row run agrees
        solo = simulate_batch(net, desk_inflow(), rcr=rcr[1:2])
        assert np.allclose(solo.p_in[0], batch.p_in[1], rtol=1e-10)

    def test_stenosis_override(self):
        net = desk_network("B", severity=0.3)
        sten = np.array([[0.0, 0.0], [0.0, 200.0]])
        batch = simulate_batch(net, desk_inflow(), stenosis=sten,
                               settings=SimSettings(strict=False))
        out = summarize_batch(batch)
        assert out["q_mean"][1, 0] < out["q_mean"][0, 0]


class TestSummarize:
    def test_unit_conversion(self):
        t = np.linspace(0, 1, 11)
        tr = circuit.TimeTraces(
            t=t, p_in=np.full(11, MMHG), q_out=np.ones((1, 11)),
            p_out=np.ones((1, 11)), outlet_names=["o"])
        s = summarize(tr)
        assert s.p_sys == pytest.approx(1.0)
        assert s.p_dia == pytest.approx(1.0)

    def test_flow_split(self):
        t = np.linspace(0, 1, 11)
        tr = circuit.TimeTraces(
            t=t, p_in=np.ones(11), q_out=np.vstack([np.full(11, 4.2), np.full(11, 5.8)]),
            p_out=np.ones((2, 11)), outlet_names=["left", "right"])
        assert summarize(tr).flow_split_left == pytest.approx(42.0)

    def test_empty_trace(self):
        tr = circuit.TimeTraces(t=np.array([]), p_in=np.array([]),
                                q_out=np.zeros((1, 0)), p_out=np.zeros((1, 0)),
                                outlet_names=["o"])
        with pytest.raises(EmptyTrace):
            summarize(tr)


def test_traces_csv_roundtrip(tmp_path):
    tr = simulate(desk_network(), desk_inflow())
    path = tmp_path / "traces.csv"
    circuit.traces_to_csv(tr, path)
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    assert data.shape[1] == 2 + 2 * len(tr.outlet_names)
    assert np.allclose(data[:, 1], tr.p_in)
