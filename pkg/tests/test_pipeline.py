import numpy as np
import pytest

from falconbc import pipeline
from falconbc.errors import (
    InvalidFractions,
    MissingColumnSpec,
    NonPositiveNominal,
    ShapeMismatch,
    ZeroVariance,
)
from falconbc.pipeline import (
    DatasetTable,
    NoiseSpec,
    Standardizer,
    add_noise,
    config_hash,
    destandardize,
    gen_dataset,
    group_kfold,
    partition_xy,
    random_search,
    reconstruction_metrics,
    sample_prior,
    split,
    standardize,
)
from falconbc.presets import CASES, desk_inflow, desk_network


class TestPrior:
    def test_uniform_box(self):
        block = sample_prior([1000.0], 0.3, 10000, seed=0)
        assert block.min() >= 700.0 and block.max() <= 1300.0
        assert abs(block.mean() - 1000.0) / 1000.0 < 0.02

    def test_zero_range_pins_nominal(self):
        block = sample_prior([5.0, 2.0], 0.0, 8, seed=1)
        assert np.allclose(block, [5.0, 2.0])

    def test_seeded_repeatability(self):
        a = sample_prior([10.0, 1.0], 0.3, 100, seed=3)
        b = sample_prior([10.0, 1.0], 0.3, 100, seed=3)
        assert np.array_equal(a, b)

    def test_nonpositive_nominal_rejected(self):
        with pytest.raises(NonPositiveNominal):
            sample_prior([1.0, -2.0], 0.3, 5, seed=0)


class TestNoise:
    def test_noise_std_scale(self):
        block = np.full((100000, 1), 80.0)
        out = add_noise(block, ["P_dia"], NoiseSpec({"P_dia": 0.05}, seed=2))
        noise = out - block
        assert abs(noise.std() - 4.0) / 4.0 < 0.02
        assert abs(noise.mean()) < 0.05

    def test_zero_noise_identity(self):
        block = np.arange(12.0).reshape(4, 3) + 1
        out = add_noise(block, ["a", "b", "c"],
                        NoiseSpec({"a": 0.0, "b": 0.0, "c": 0.0}))
        assert np.array_equal(out, block)

    def test_negative_rel_rejected_at_construction(self):
        with pytest.raises(ValueError):
            NoiseSpec({"a": -0.1})

    def test_missing_column(self):
        with pytest.raises(MissingColumnSpec):
            add_noise(np.ones((3, 2)), ["a", "b"], NoiseSpec({"a": 0.1}))


class TestStandardize:
    def test_unit_moments(self):
        rng = np.random.default_rng(5)
        block = rng.normal(3.0, 2.5, size=(500, 4))
        std, mu, sigma = standardize(block)
        assert np.max(np.abs(std.mean(axis=0))) < 1e-12
        assert np.max(np.abs(std.std(axis=0) - 1.0)) < 1e-12

    def test_roundtrip(self):
        rng = np.random.default_rng(6)
        block = rng.normal(size=(50, 3)) * 100
        std, mu, sigma = standardize(block)
        assert np.allclose(destandardize(std, mu, sigma), block, atol=1e-12)

    def test_constant_column_rejected(self):
        block = np.column_stack([np.ones(10), np.arange(10.0)])
        with pytest.raises(ZeroVariance):
            standardize(block)

    def test_standardizer_estimator(self):
        rng = np.random.default_rng(7)
        X = rng.normal(5.0, 3.0, size=(100, 2))
        st = Standardizer().fit(X)
        Z = st.transform(X)
        assert np.allclose(st.inverse_transform(Z), X, atol=1e-12)
        assert st.get_params() == {}


class TestSplit:
    def test_ninety_ten(self):
        parts = split(1000, [0.9, 0.1], seed=0)
        assert len(parts[0]) == 900 and len(parts[1]) == 100
        assert np.intersect1d(parts[0], parts[1]).size == 0
        assert np.union1d(parts[0], parts[1]).size == 1000

    def test_invalid_fractions(self):
        with pytest.raises(InvalidFractions):
            split(100, [0.5, 0.6])

    def test_seed_changes_partition(self):
        a = split(50, [0.5, 0.5], seed=1)
        b = split(50, [0.5, 0.5], seed=2)
        assert not np.array_equal(a[0], b[0])

    def test_group_kfold_partitions_groups(self):
        groups = np.repeat(np.arange(48), 3)
        folds = group_kfold(groups, k=6, seed=0)
        assert len(folds) == 6
        all_val_groups = []
        for train_idx, val_idx in folds:
            tg = set(groups[train_idx])
            vg = set(groups[val_idx])
            assert not tg & vg
            all_val_groups.extend(vg)
        assert sorted(all_val_groups) == list(range(48))

    def test_kfold_summary(self):
        mean, std = pipeline.kfold_summary([1.0, 2.0, 3.0])
        assert mean == pytest.approx(2.0)
        assert std == pytest.approx(1.0)


class TestMetrics:
    def test_perfect_prediction(self):
        truth = np.array([[10.0, 20.0]])
        pred = np.repeat(truth[:, None, :], 5, axis=1)
        rep = reconstruction_metrics(pred, truth, ["a", "b"])
        for t in rep.targets:
            assert t.abs_mean == 0.0 and t.sign_mean == 0.0

    def test_hand_computed_fixture(self):
        truth = np.array([[10.0]])
        pred = np.array([[[9.0], [13.0]]])
        rep = reconstruction_metrics(pred, truth, ["y"])
        t = rep.by_name("y")
        assert t.abs_mean == pytest.approx(2.0)
        assert t.sign_mean == pytest.approx(1.0)
        assert t.rel_abs_mean == pytest.approx(0.2)
        assert t.rel_sign_mean == pytest.approx(0.1)

    def test_symmetric_predictions_cancel_signed(self):
        truth = np.array([[5.0]])
        pred = np.array([[[4.0], [6.0]]])
        t = reconstruction_metrics(pred, truth).targets[0]
        assert t.sign_mean == 0.0
        assert t.abs_mean > 0.0

    def test_signed_below_absolute(self):
        rng = np.random.default_rng(8)
        truth = rng.normal(10, 2, size=(20, 3))
        pred = truth[:, None, :] + rng.normal(0, 1, size=(20, 50, 3))
        rep = reconstruction_metrics(pred, truth)
        for t in rep.targets:
            assert abs(t.sign_mean) <= t.abs_mean

    def test_zero_truth_reported_missing(self):
        truth = np.array([[0.0], [10.0]])
        pred = np.ones((2, 3, 1))
        t = reconstruction_metrics(pred, truth).targets[0]
        assert t.n_missing == 1
        assert np.isfinite(t.rel_abs_mean)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            reconstruction_metrics(np.ones((2, 3, 2)), np.ones((2, 1)))

    def test_report_save(self, tmp_path):
        rep = reconstruction_metrics(np.ones((1, 2, 1)), np.ones((1, 1)), ["x"])
        path = tmp_path / "metrics.json"
        rep.save(path)
        import json
        doc = json.loads(path.read_text())
        assert doc["n_test"] == 1 and doc["targets"][0]["name"] == "x"


class TestDatasetTable:
    def make_table(self):
        rng = np.random.default_rng(9)
        z = rng.normal(size=(4, 2))
        return DatasetTable(
            b=rng.normal(size=(12, 3)), c=rng.normal(size=(12, 2)),
            b_names=["r1", "r2", "c1"], c_names=["P_dia", "P_sys"],
            z=z, z_names=["za", "zb"], group_id=np.repeat(np.arange(4), 3),
            units={"P_dia": "mmHg"}, meta={"seed": 9},
        )

    def test_group_join(self):
        table = self.make_table()
        zr = table.z_rows()
        assert zr.shape == (12, 2)
        assert np.array_equal(zr[0], zr[2])
        assert not np.array_equal(zr[0], zr[3])

    def test_roundtrip(self, tmp_path):
        table = self.make_table()
        prefix = str(tmp_path / "data")
        table.save(prefix)
        loaded = DatasetTable.load(prefix)
        assert np.array_equal(loaded.b, table.b)
        assert np.array_equal(loaded.c, table.c)
        assert np.array_equal(loaded.z, table.z)
        assert np.array_equal(loaded.group_id, table.group_id)
        assert loaded.meta["seed"] == 9

    def test_partition_xy(self):
        table = self.make_table()
        x, xn, y, yn = partition_xy(table, estimate=("B",), condition=("C", "Z"))
        assert x.shape == (12, 3) and y.shape == (12, 4)
        assert yn[0] == "C:P_dia" and yn[-1] == "Z:zb"

    def test_partition_joint_estimation(self):
        table = self.make_table()
        x, xn, y, yn = partition_xy(table, estimate=("B", "Z"), condition=("C",))
        assert x.shape == (12, 5)
        assert y.shape == (12, 2)

    def test_mismatched_rows_rejected(self):
        with pytest.raises(ShapeMismatch):
            DatasetTable(b=np.ones((3, 1)), c=np.ones((4, 1)),
                         b_names=["a"], c_names=["b"])


class TestGenDataset:
    def test_desk_rc_dataset(self):
        case = CASES["rc"]
        table = gen_dataset(case, desk_network(), desk_inflow(), n=40, seed=0)
        assert table.b.shape == (40, 2)
        assert table.c_names == ["P_dia", "P_sys"]
        box = pipeline.prior_box(case.nominal, 0.3)
        assert np.all(table.b >= box[:, 0]) and np.all(table.b <= box[:, 1])
        # noisy pressures stay in a physiological ballpark
        assert 30 < table.c[:, 0].mean() < 150
        assert table.meta["case"] == "rc"

    def test_reproducible(self):
        case = CASES["rc"]
        t1 = gen_dataset(case, desk_network(), desk_inflow(), n=10, seed=5)
        t2 = gen_dataset(case, desk_network(), desk_inflow(), n=10, seed=5)
        assert np.array_equal(t1.b, t2.b)
        assert np.array_equal(t1.c, t2.c)


class TestRandomSearch:
    def test_bounds_respected(self):
        _, log = random_search(lambda p: p["lr"], n_trials=50, n_data=100, seed=0)
        for entry in log:
            assert 1 <= entry["layers"] <= 4
            assert 1 <= entry["neurons"] <= 128
            assert 1e-4 <= entry["lr"] <= 1e-2
            assert 8 <= entry["batch"] <= 64

    def test_large_dataset_batch_range(self):
        _, log = random_search(lambda p: 0.0, n_trials=30, n_data=1000, seed=1)
        assert all(16 <= e["batch"] <= 128 for e in log)

    def test_single_trial(self):
        best, log = random_search(lambda p: 1.23, n_trials=1, n_data=100, seed=2)
        assert len(log) == 1 and best["loss"] == 1.23

    def test_argmin_of_deterministic_objective(self):
        best, log = random_search(lambda p: p["lr"], n_trials=40, n_data=100, seed=3)
        assert best["loss"] == min(e["loss"] for e in log)


def test_config_hash_stable():
    a = config_hash({"x": 1, "y": [1, 2]})
    b = config_hash({"y": [1, 2], "x": 1})
    assert a == b
    assert a != config_hash({"x": 2, "y": [1, 2]})
