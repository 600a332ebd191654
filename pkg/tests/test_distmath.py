import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mprlab.distmath import (
    FrequencyTable,
    JointActionSample,
    PolicyDistanceMatrix,
    ProjectionSet,
    SampleSet,
    build_distance_matrix,
    build_frequency_table,
    classical_mds,
    pairwise_euclidean,
    sliced_wasserstein,
    symmetric_kl,
    wasserstein_1d,
)


def table_from_probs(probs, smoothing=0.0, scale=1000):
    counts = np.asarray(probs) * scale
    assert np.allclose(counts, np.round(counts))
    return FrequencyTable(np.round(counts).astype(int).reshape(1, -1), smoothing=smoothing)


def samples(pairs, label=0):
    return [JointActionSample(e, o, label) for e, o in pairs]


class TestFrequencyTable:
    def test_direct_counting(self):
        t = build_frequency_table(samples([(0, 0), (0, 0), (1, 2), (1, 2)]), (2, 3), smoothing=0)
        p = t.probabilities()
        assert p[0, 0] == 0.5
        assert p[1, 2] == 0.5
        assert p[0, 1] == p[0, 2] == p[1, 0] == p[1, 1] == 0.0

    def test_probabilities_sum_to_one(self):
        rng = np.random.default_rng(0)
        for smoothing in (0.0, 0.5, 1.0):
            pairs = [(int(a), int(o)) for a, o in rng.integers(0, 3, size=(40, 2))]
            t = build_frequency_table(samples(pairs), (3, 3), smoothing=smoothing)
            assert abs(t.probabilities().sum() - 1.0) < 1e-12

    def test_additive_smoothing_by_hand(self):
        # two samples on a 2x2 grid with pseudo-count 1: (count+1)/(2+4)
        t = build_frequency_table(samples([(0, 0), (0, 1)]), (2, 2), smoothing=1.0)
        p = t.probabilities()
        assert p[0, 0] == pytest.approx(2 / 6, abs=1e-15)
        assert p[0, 1] == pytest.approx(2 / 6, abs=1e-15)
        assert p[1, 0] == pytest.approx(1 / 6, abs=1e-15)
        assert p[1, 1] == pytest.approx(1 / 6, abs=1e-15)

    def test_empty_and_out_of_range(self):
        with pytest.raises(ValueError):
            build_frequency_table([], (2, 2))
        with pytest.raises(ValueError):
            build_frequency_table(samples([(0, 5)]), (2, 2))
        with pytest.raises(ValueError):
            build_frequency_table(samples([(2, 0)]), (2, 2))

    def test_order_invariance(self):
        pairs = [(0, 1), (1, 0), (1, 1), (0, 0), (1, 1)]
        a = build_frequency_table(samples(pairs), (2, 2))
        b = build_frequency_table(samples(pairs[::-1]), (2, 2))
        assert np.array_equal(a.counts, b.counts)

    def test_joint_opponent_axes(self):
        # two opponents: cell is (ego, opp1, opp2)
        recs = [JointActionSample(1, (0, 2), 0)]
        t = build_frequency_table(recs, (2, 2, 3))
        assert t.counts[1, 0, 2] == 1
        assert t.total == 1

    def test_ego_by_opponent_matrix(self):
        recs = [JointActionSample(1, (0, 2), 0), JointActionSample(0, (1, 1), 0)]
        t = build_frequency_table(recs, (2, 2, 3))
        mat = t.ego_by_opponent()
        assert mat.shape == (2, 6)
        assert mat[1, 2] == 0.5  # (0,2) flattens to 0*3+2
        assert mat[0, 4] == 0.5  # (1,1) flattens to 1*3+1


class TestSymmetricKl:
    def test_identical_tables(self):
        t = table_from_probs([0.25, 0.75])
        assert symmetric_kl(t, t) == 0.0

    def test_hand_value(self):
        # KL(p||q) + KL(q||p) for p=(.5,.5), q=(.25,.75), natural log
        p = table_from_probs([0.5, 0.5])
        q = table_from_probs([0.25, 0.75])
        expected = (
            0.5 * math.log(0.5 / 0.25)
            + 0.5 * math.log(0.5 / 0.75)
            + 0.25 * math.log(0.25 / 0.5)
            + 0.75 * math.log(0.75 / 0.5)
        )
        assert expected == pytest.approx(0.27465, abs=1e-5)
        assert symmetric_kl(p, q) == pytest.approx(expected, abs=1e-12)

    def test_zero_against_positive_cell_errors(self):
        p = table_from_probs([1.0, 0.0])
        q = table_from_probs([0.5, 0.5])
        with pytest.raises(ValueError, match="smoothing"):
            symmetric_kl(p, q)

    def test_shared_zero_cells_allowed(self):
        p = table_from_probs([0.5, 0.5, 0.0])
        q = table_from_probs([0.25, 0.75, 0.0])
        assert symmetric_kl(p, q) > 0

    def test_mismatched_grids(self):
        p = table_from_probs([0.5, 0.5])
        q = FrequencyTable(np.ones((2, 2), dtype=int))
        with pytest.raises(ValueError, match="grids"):
            symmetric_kl(p, q)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=60, deadline=None)
    def test_properties_random_tables(self, seed):
        rng = np.random.default_rng(seed)
        p = FrequencyTable(rng.integers(0, 30, size=(2, 4)) + 0, smoothing=1.0)
        q = FrequencyTable(rng.integers(0, 30, size=(2, 4)) + 0, smoothing=1.0)
        d = symmetric_kl(p, q)
        assert d >= 0.0
        assert d == pytest.approx(symmetric_kl(q, p), abs=1e-12)
        same = np.array_equal(p.probabilities(), q.probabilities())
        assert (d < 1e-12) == same or d >= 0


class TestWasserstein1d:
    def test_identical(self):
        x = [3.0, -1.0, 2.0]
        assert wasserstein_1d(x, x) == 0.0

    def test_sort_and_average(self):
        assert wasserstein_1d([0.0, 1.0], [0.5, 1.5]) == pytest.approx(0.5, abs=1e-15)

    def test_single_point_translation(self):
        for c in (-2.5, 0.0, 4.25):
            assert wasserstein_1d([0.0], [c]) == pytest.approx(abs(c), abs=1e-15)

    def test_empty_errors(self):
        with pytest.raises(ValueError):
            wasserstein_1d([], [1.0])

    def test_unequal_sizes_against_scipy(self):
        scipy_stats = pytest.importorskip("scipy.stats")
        rng = np.random.default_rng(3)
        for _ in range(50):
            x = rng.standard_normal(int(rng.integers(1, 40)))
            y = rng.standard_normal(int(rng.integers(1, 40))) * 2 + 1
            assert wasserstein_1d(x, y) == pytest.approx(
                scipy_stats.wasserstein_distance(x, y), abs=1e-10
            )

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=30), st.floats(-10, 10))
    @settings(max_examples=60, deadline=None)
    def test_translation_property(self, xs, shift):
        xs = np.asarray(xs)
        assert wasserstein_1d(xs, xs + shift) == pytest.approx(abs(shift), rel=1e-9, abs=1e-9)


class TestSlicedWasserstein:
    def test_identical_sets(self):
        pts = np.random.default_rng(0).standard_normal((30, 3))
        proj = ProjectionSet.generate(3, 16, seed=1)
        assert sliced_wasserstein(SampleSet(pts), SampleSet(pts), proj) == 0.0

    def test_one_dimension_matches_w1(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal(25)
        y = rng.standard_normal(31) + 0.5
        proj = ProjectionSet(np.array([[1.0]]))
        sw = sliced_wasserstein(SampleSet(x[:, None]), SampleSet(y[:, None]), proj)
        assert sw == pytest.approx(wasserstein_1d(x, y), abs=1e-12)
        # the reflected direction gives the same value
        proj_neg = ProjectionSet(np.array([[-1.0]]))
        sw_neg = sliced_wasserstein(SampleSet(x[:, None]), SampleSet(y[:, None]), proj_neg)
        assert sw_neg == pytest.approx(sw, abs=1e-12)

    def test_gaussian_shift_expectation(self):
        # exact per-direction distance for a pure shift is |cos(theta)|,
        # whose mean over the circle is 2/pi
        rng = np.random.default_rng(11)
        x = rng.standard_normal((200, 2))
        proj = ProjectionSet.generate(2, 500, seed=7)
        sw = sliced_wasserstein(SampleSet(x), SampleSet(x + np.array([1.0, 0.0])), proj)
        assert sw == pytest.approx(2 / math.pi, abs=0.05)

    def test_translation_invariance_of_pairs(self):
        rng = np.random.default_rng(2)
        x = SampleSet(rng.standard_normal((20, 3)))
        y = SampleSet(rng.standard_normal((25, 3)))
        shift = np.array([0.3, -1.0, 2.0])
        proj = ProjectionSet.generate(3, 40, seed=3)
        a = sliced_wasserstein(x, y, proj)
        b = sliced_wasserstein(SampleSet(x.points + shift), SampleSet(y.points + shift), proj)
        assert a == pytest.approx(b, abs=1e-9)

    def test_dimension_mismatch(self):
        proj = ProjectionSet.generate(3, 4, seed=0)
        with pytest.raises(ValueError, match="dimension"):
            sliced_wasserstein(SampleSet(np.zeros((2, 2))), SampleSet(np.zeros((2, 3))), proj)

    def test_monte_carlo_consistency(self):
        # variance across independent projection sets shrinks with set size
        rng = np.random.default_rng(9)
        x = SampleSet(rng.standard_normal((60, 3)))
        y = SampleSet(rng.standard_normal((60, 3)) + 0.8)

        def spread(count, seeds):
            vals = [
                sliced_wasserstein(x, y, ProjectionSet.generate(3, count, seed=s))
                for s in seeds
            ]
            return np.std(vals)

        assert spread(1000, range(12)) < spread(10, range(12))


class TestProjectionSet:
    def test_unit_norms(self):
        proj = ProjectionSet.generate(5, 64, seed=2)
        norms = np.linalg.norm(proj.directions, axis=1)
        assert np.all(np.abs(norms - 1.0) < 1e-9)

    def test_seed_determinism(self):
        a = ProjectionSet.generate(4, 32, seed=5)
        b = ProjectionSet.generate(4, 32, seed=5)
        assert np.array_equal(a.directions, b.directions)

    def test_rejects_non_unit(self):
        with pytest.raises(ValueError):
            ProjectionSet(np.array([[1.0, 1.0]]))


class TestDistanceMatrix:
    def test_identical_distributions_zero(self):
        t = table_from_probs([0.5, 0.5], smoothing=1.0)
        m = build_distance_matrix({"a": t, "b": t}, mode="kl")
        assert np.allclose(m.values, 0.0)

    def test_kl_mode_matches_pairwise_calls(self):
        rng = np.random.default_rng(4)
        tables = {
            f"p{i}": FrequencyTable(rng.integers(1, 20, size=(2, 3)), smoothing=1.0)
            for i in range(3)
        }
        m = build_distance_matrix(tables, mode="kl")
        labels = list(tables)
        for i in range(3):
            for j in range(3):
                expected = 0.0 if i == j else symmetric_kl(tables[labels[i]], tables[labels[j]])
                assert m.values[i, j] == pytest.approx(expected, abs=1e-12)

    def test_transpose_symmetry(self):
        rng = np.random.default_rng(8)
        proj = ProjectionSet.generate(2, 8, seed=1)
        sets = {f"s{i}": SampleSet(rng.standard_normal((15, 2)) + i) for i in range(4)}
        m = build_distance_matrix(sets, mode="sliced_wasserstein", projections=proj)
        assert np.array_equal(m.values, m.values.T)
        assert np.all(np.diag(m.values) == 0)

    def test_mixed_kinds_rejected(self):
        t = table_from_probs([1.0])
        s = SampleSet(np.zeros((3, 2)))
        with pytest.raises(ValueError):
            build_distance_matrix({"a": t, "b": s}, mode="kl")

    def test_csv_round_trip(self, tmp_path):
        vals = np.array([[0.0, 1.5], [1.5, 0.0]])
        m = PolicyDistanceMatrix(vals, ["x", "y"])
        path = tmp_path / "d.csv"
        m.to_csv(path)
        back = PolicyDistanceMatrix.from_csv(path)
        assert back.labels == ["x", "y"]
        assert np.array_equal(back.values, vals)


class TestClassicalMds:
    def test_collinear_three_points(self):
        d = np.array([[0.0, 1.0, 2.0], [1.0, 0.0, 1.0], [2.0, 1.0, 0.0]])
        pts = classical_mds(d, 2)
        rec = pairwise_euclidean(pts)
        assert np.max(np.abs(rec - d)) < 1e-9
        # middle point sits midway between the outer two (second axis is
        # eigensolver noise, so compare at 1e-8)
        assert np.allclose(pts[1], (pts[0] + pts[2]) / 2, atol=1e-8)
        cross = np.cross(pts[1] - pts[0], pts[2] - pts[0])
        assert abs(float(cross)) < 1e-8

    def test_zero_matrix(self):
        pts = classical_mds(np.zeros((4, 4)), 2)
        assert np.allclose(pts, 0.0)

    def test_round_trip_random_planar_points(self):
        rng = np.random.default_rng(6)
        pts = rng.standard_normal((4, 2))
        d = pairwise_euclidean(pts)
        rec = pairwise_euclidean(classical_mds(d, 2))
        assert np.max(np.abs(rec - d)) < 1e-6

    def test_output_centered(self):
        rng = np.random.default_rng(7)
        d = pairwise_euclidean(rng.standard_normal((6, 3)))
        pts = classical_mds(d, 3)
        assert np.allclose(pts.mean(axis=0), 0.0, atol=1e-9)

    def test_non_euclidean_warns(self):
        d = np.array([[0.0, 1.0, 1.0], [1.0, 0.0, 3.0], [1.0, 3.0, 0.0]])  # violates triangle
        with pytest.warns(UserWarning, match="Euclidean"):
            classical_mds(d, 2)

    def test_rejects_asymmetric(self):
        with pytest.raises(ValueError):
            classical_mds(np.array([[0.0, 1.0], [2.0, 0.0]]), 1)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_round_trip_property(self, seed):
        rng = np.random.default_rng(seed)
        pts = rng.uniform(-3, 3, size=(5, 2))
        d = pairwise_euclidean(pts)
        rec = pairwise_euclidean(classical_mds(d, 2))
        assert np.max(np.abs(rec - d)) < 1e-6
