"""
Unit tests for load profiles, trajectory datasets and Hankel systems
"""

import json

import numpy as np
import pytest

from ddpflow.data import (
    CATEGORIES,
    TrajectoryDataset,
    build_hankel,
    category_shape,
    check_static_membership,
    generate_dataset,
    load_dataset,
    output_rows,
    rank_profile,
    save_dataset,
    synth_profiles,
)
from ddpflow.exceptions import (
    DimensionMismatchError,
    EmptyDatasetError,
    MalformedFieldError,
    NoConvergenceError,
    ValidationError,
)


@pytest.mark.unit
class TestLoadProfiles:
    """Test synthetic load profiles"""

    @pytest.mark.parametrize("category", CATEGORIES)
    def test_category_shapes_positive(self, category):
        """Test every category has a positive daily shape"""
        shape = category_shape(category, 96)

        assert shape.shape == (96,)
        assert np.all(shape > 0)

    def test_unknown_category(self):
        """Test an unknown category name"""
        with pytest.raises(ValidationError):
            category_shape("industrial")

    def test_seeded(self):
        """Test profiles are reproducible from the seed"""
        assert synth_profiles(10, seed=1) == synth_profiles(10, seed=1)
        assert synth_profiles(10, seed=1) != synth_profiles(10, seed=2)

    def test_injections_are_loads(self):
        """Test injections are negative with the drawn power factor"""
        profiles = synth_profiles(4, t_day=24, seed=0)
        inj = profiles.injections(5, scale=0.5)

        assert np.all(inj.p < 0) and np.all(inj.q < 0)
        np.testing.assert_allclose(
            inj.q / inj.p, np.tan(np.arccos(profiles.power_factor))
        )
        np.testing.assert_allclose(
            inj.p, -0.5 * profiles.peak_p * profiles.multipliers(5)
        )

    def test_multipliers_wrap_around(self):
        """Test steps past the day wrap"""
        profiles = synth_profiles(3, t_day=24, seed=0)

        np.testing.assert_array_equal(profiles.multipliers(2), profiles.multipliers(26))

    def test_explicit_peaks(self):
        """Test peak_p overrides the jittered base peak"""
        profiles = synth_profiles(2, seed=0, peak_p=[0.1, -0.2])

        assert profiles.peak_p.tolist() == [0.1, 0.2]
        with pytest.raises(DimensionMismatchError):
            synth_profiles(2, peak_p=[0.1])

    @pytest.mark.parametrize("n,t_day", [(0, 96), (3, 1)])
    def test_invalid_sizes(self, n, t_day):
        """Test empty node sets and one-step days"""
        with pytest.raises(ValidationError):
            synth_profiles(n, t_day=t_day)


@pytest.mark.unit
class TestGenerateDataset:
    """Test trajectory generation"""

    def test_shapes_and_certificates(self, feeder, train_dataset):
        """Test u/y layout and per-sample residual certificates"""
        n, T = feeder.n, 48

        assert train_dataset.u.shape == (2 * n, T)
        assert train_dataset.y.shape == (4 * n + 1, T)
        assert train_dataset.certificates.shape == (T, 4)
        assert train_dataset.certificates.max() <= 1e-10
        np.testing.assert_allclose(train_dataset.y[-1], 1.0)
        assert train_dataset.meta["seed"] == 3
        assert train_dataset.is_full

    def test_reproducible(self, feeder, profiles, train_dataset):
        """Test the same seed regenerates the same samples"""
        again = generate_dataset(feeder, profiles, diversity=0.1, seed=3)

        np.testing.assert_array_equal(again.u, train_dataset.u)
        np.testing.assert_array_equal(again.y, train_dataset.y)

    def test_worker_pool_matches_sequential(self, feeder, profiles, train_dataset):
        """Test threaded generation gives identical columns"""
        pooled = generate_dataset(feeder, profiles, diversity=0.1, seed=3, workers=3)

        np.testing.assert_array_equal(pooled.y, train_dataset.y)

    def test_profile_size_mismatch(self, feeder):
        """Test profiles must cover the feeder"""
        with pytest.raises(DimensionMismatchError):
            generate_dataset(feeder, synth_profiles(feeder.n + 1))

    def test_failed_step_is_reported(self, feeder, profiles):
        """Test a non-converging step carries its index"""
        with pytest.raises(NoConvergenceError) as exc_info:
            generate_dataset(feeder, profiles, max_iter=1)

        assert exc_info.value.step == 0

    def test_empty_dataset(self):
        """Test a dataset without samples"""
        with pytest.raises(EmptyDatasetError):
            TrajectoryDataset(u=np.zeros((4, 0)), y=np.zeros((9, 0)), certificates=np.zeros((0, 4)))

    def test_inconsistent_dataset(self):
        """Test y must match the 4n+1 layout"""
        with pytest.raises(DimensionMismatchError):
            TrajectoryDataset(u=np.zeros((4, 3)), y=np.zeros((8, 3)), certificates=np.zeros((3, 4)))


@pytest.mark.unit
class TestOutputRows:
    """Test measured-row selection"""

    def test_full_layout(self):
        """Test rows of node 2 in a three-node layout"""
        assert output_rows(3, [0, 2]).tolist() == [1, 4, 7, 10, 12]

    def test_nested_layout(self):
        """Test selection from an already reduced layout"""
        assert output_rows(5, [0, 4], layout=[0, 2, 4]).tolist() == [1, 3, 5, 7, 8]

    def test_missing_from_layout(self):
        """Test nodes absent from the layout"""
        with pytest.raises(ValidationError):
            output_rows(5, [0, 3], layout=[0, 2, 4])

    def test_restrict(self, train_dataset):
        """Test restricting a dataset keeps the slack and measured rows"""
        reduced = train_dataset.restrict([0, 2, 5])

        assert reduced.measured == (0, 2, 5)
        assert reduced.y.shape == (9, train_dataset.T)
        np.testing.assert_array_equal(reduced.y[0], train_dataset.y[1])
        with pytest.raises(ValidationError):
            train_dataset.restrict([1, 2])


@pytest.mark.unit
class TestHankel:
    """Test Hankel construction and rank"""

    def test_persistently_exciting(self, feeder, hankel):
        """Test jittered data reaches rank 3n+1"""
        assert hankel.stacked_rank == 3 * feeder.n + 1
        assert hankel.pe_satisfied
        assert hankel.is_full

    def test_short_dataset_is_rank_bounded(self, feeder):
        """Test fewer than 3n+1 samples cannot be exciting"""
        profiles = synth_profiles(feeder.n, t_day=2 * feeder.n, seed=0)
        hs = build_hankel(generate_dataset(feeder, profiles, diversity=0.1))

        assert hs.stacked_rank <= hs.T
        assert not hs.pe_satisfied

    def test_without_diversity_rank_collapses(self, feeder, profiles):
        """Test category shapes alone don't excite every direction"""
        hs = build_hankel(generate_dataset(feeder, profiles))

        assert hs.stacked_rank < 3 * feeder.n + 1

    def test_measured_hankel(self, train_dataset):
        """Test measured output rows and the PE flag"""
        hs = build_hankel(train_dataset, measured=[0, 1, 4])

        assert hs.H_y.shape == (9, train_dataset.T)
        assert hs.measured_plus == (1, 4)
        assert not hs.pe_satisfied

    def test_membership(self, hankel, test_dataset):
        """Test unseen operating points lie in the column span"""
        u, y = test_dataset.column(7)
        member = check_static_membership(hankel, u, y)

        assert member.member
        assert member.residual <= 1e-7
        np.testing.assert_allclose(hankel.stacked @ member.g, np.concatenate([u, y]), atol=1e-7)

    def test_membership_rejects_perturbation(self, hankel, test_dataset):
        """Test a perturbed output leaves the span"""
        u, y = test_dataset.column(7)
        y[2] += 1e-2

        assert not check_static_membership(hankel, u, y).member

    def test_membership_shape(self, hankel):
        """Test mismatched vectors"""
        with pytest.raises(DimensionMismatchError):
            check_static_membership(hankel, np.zeros(3), np.zeros(3))

    def test_rank_profile(self, feeder, hankel):
        """Test rank diagnostics"""
        profile = rank_profile(hankel)

        assert profile["rank"] == profile["required"] == 3 * feeder.n + 1
        assert 0 < profile["smallest_kept_ratio"] <= 1
        assert profile["threshold"] == pytest.approx(1e-8 * profile["sigma_max"])


@pytest.mark.unit
class TestDatasetDirectory:
    """Test dataset persistence"""

    def test_save_and_load(self, tmp_path, train_dataset):
        """Test a saved dataset reloads with its metadata"""
        save_dataset(train_dataset, str(tmp_path))
        loaded = load_dataset(str(tmp_path))

        assert sorted(p.name for p in tmp_path.iterdir()) == [
            "certificates.csv",
            "meta.json",
            "u.csv",
            "y.csv",
        ]
        np.testing.assert_allclose(loaded.y, train_dataset.y, rtol=0, atol=1e-15)
        assert loaded.meta["seed"] == train_dataset.meta["seed"]
        assert loaded.is_full

    def test_measured_dataset_keeps_layout(self, tmp_path, train_dataset):
        """Test a restricted dataset records its measured set"""
        save_dataset(train_dataset.restrict([0, 3]), str(tmp_path))

        assert load_dataset(str(tmp_path)).measured == (0, 3)

    def test_malformed_meta(self, tmp_path, train_dataset):
        """Test unreadable metadata"""
        save_dataset(train_dataset, str(tmp_path))
        (tmp_path / "meta.json").write_text("{not json")

        with pytest.raises(MalformedFieldError):
            load_dataset(str(tmp_path))

    def test_meta_is_sorted_json(self, tmp_path, train_dataset):
        """Test metadata is plain JSON"""
        save_dataset(train_dataset, str(tmp_path))
        meta = json.loads((tmp_path / "meta.json").read_text())

        assert meta["n"] == train_dataset.n
        assert meta["T"] == train_dataset.T
