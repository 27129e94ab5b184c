"""Tests for localization and planning studies."""
import itertools
import math

import numpy as np
import pytest

from rxsplat.apps import (
    FingerprintDB,
    coverage_fraction,
    coverage_heatmap,
    covered,
    fingerprint_distances,
    gap_to_upper,
    greedy_plan,
    localization_study,
    planning_study,
    wknn_localize,
)


def coverage_table(sets, num_tx):
    """-50 dBm where a candidate reaches a transmitter, -100 elsewhere."""
    table = np.full((num_tx, len(sets)), -100.0)
    for c, reached in enumerate(sets):
        table[list(reached), c] = -50.0
    return table


class TestWknn:
    """Test weighted nearest-neighbour localization."""

    def test_exact_match(self):
        """Test k=1 with the query equal to one row."""
        db = FingerprintDB(np.array([[0, 0, 0], [1, 2, 3], [5, 5, 5]]), np.array([[-40, -60], [-50, -55], [-70, -45]]))
        np.testing.assert_allclose(wknn_localize(db, [-50, -55], k=1), [1, 2, 3])

    def test_equidistant(self):
        """Test that a query between two rows lands at their midpoint."""
        db = FingerprintDB(np.array([[0, 0, 0], [10, 0, 0]]), np.array([[-40.0], [-60.0]]))
        np.testing.assert_allclose(wknn_localize(db, [-50.0], k=2), [5, 0, 0])

    def test_brute_force(self, rng):
        """Test k=3 against sort plus weighted mean."""
        positions = rng.uniform(0, 10, size=(12, 3))
        prints = rng.uniform(-90, -30, size=(12, 5))
        query = rng.uniform(-90, -30, size=5)
        d = np.sqrt(((prints - query) ** 2).sum(axis=1))
        idx = np.argsort(d)[:3]
        w = 1.0 / (d[idx] + 1e-6)
        expected = (w[:, None] * positions[idx]).sum(axis=0) / w.sum()
        np.testing.assert_allclose(wknn_localize(FingerprintDB(positions, prints), query, k=3), expected)

    def test_convex_hull(self, rng):
        """Test that the estimate stays inside the selected box."""
        positions = rng.uniform(0, 10, size=(20, 3))
        db = FingerprintDB(positions, rng.uniform(-90, -30, size=(20, 4)))
        estimate = wknn_localize(db, rng.uniform(-90, -30, size=4), k=20)
        assert np.all(estimate >= positions.min(axis=0)) and np.all(estimate <= positions.max(axis=0))

    def test_tie_to_lower_index(self):
        """Test that equal distances prefer the first row."""
        db = FingerprintDB(np.array([[1, 0, 0], [2, 0, 0]]), np.array([[-40.0], [-60.0]]))
        np.testing.assert_array_equal(wknn_localize(db, [-50.0], k=1), [1, 0, 0])

    def test_empty(self):
        """Test that an empty database is rejected."""
        with pytest.raises(ValueError, match="empty"):
            wknn_localize(FingerprintDB(np.zeros((0, 3)), np.zeros((0, 2))), [0.0, 0.0], k=1)

    def test_masked_dimensions(self):
        """Test that distances rescale over jointly valid dimensions."""
        db = FingerprintDB(np.zeros((1, 3)), np.array([[-50.0, np.nan]]))
        assert fingerprint_distances(db, [-53.0, -40.0])[0] == pytest.approx(3.0 * math.sqrt(2))

    def test_nan_in_valid_entry(self):
        """Test that a NaN marked valid is rejected."""
        with pytest.raises(ValueError, match="NaN"):
            FingerprintDB(np.zeros((1, 3)), np.array([[np.nan]]), mask=np.array([[True]]))


class TestCoverage:
    """Test coverage fractions and heatmaps."""

    def test_hand_table(self):
        """Test three transmitters by hand."""
        table = np.array([[-70.0, -90.0], [-85.0, -79.0], [-95.0, -81.0]])
        assert coverage_fraction(table, [0]) == pytest.approx(1 / 3)
        assert coverage_fraction(table, [0, 1]) == pytest.approx(2 / 3)

    def test_empty_selection(self):
        """Test that a selection is required."""
        with pytest.raises(ValueError):
            covered(np.zeros((2, 2)), [])

    def test_heatmap(self):
        """Test per-cell fractions with empty cells as NaN."""
        positions = np.array([[0.1, 0.1, 0], [0.2, 0.3, 0], [1.5, 0.1, 0], [1.9, 1.9, 0]])
        heat = coverage_heatmap(positions, [True, False, True, True], cell_size=1.0,
                                bounds_min=(0, 0, 0), bounds_max=(2, 2, 0))
        assert heat.shape == (2, 2)
        assert heat[0, 0] == 0.5
        assert heat[0, 1] == 1.0
        assert math.isnan(heat[1, 0])
        assert heat[1, 1] == 1.0

    def test_gap(self):
        """Test the mean absolute difference over populated cells."""
        a = np.array([[0.5, np.nan], [1.0, 0.0]])
        b = np.array([[1.0, 1.0], [1.0, np.nan]])
        assert gap_to_upper(a, b) == 0.25


class TestGreedyPlan:
    """Test greedy maximum coverage."""

    def test_example(self):
        """Test A={1,2,3}, B={3,4}, C={4,5} with K=2."""
        table = coverage_table([{0, 1, 2}, {2, 3}, {3, 4}], 5)
        assert greedy_plan(table, 2) == [0, 2]
        assert coverage_fraction(table, [0, 2]) == 1.0

    def test_all_candidates(self):
        """Test that K = all candidates covers the union."""
        table = coverage_table([{0}, {1, 2}, {2}], 4)
        order = greedy_plan(table, 3)
        assert sorted(order) == [0, 1, 2]
        assert coverage_fraction(table, order) == 0.75

    def test_dominant_first(self):
        """Test that a candidate covering everything goes first."""
        table = coverage_table([{0}, {0, 1, 2, 3}, {1}], 4)
        assert greedy_plan(table, 1) == [1]

    def test_monotone(self, rng):
        """Test that coverage never falls along the selection."""
        table = rng.uniform(-100, -60, size=(30, 8))
        order = greedy_plan(table, 8)
        values = [coverage_fraction(table, order[:i]) for i in range(1, 9)]
        assert all(a <= b for a, b in zip(values, values[1:]))

    @pytest.mark.parametrize("seed", range(10))
    def test_approximation_bound(self, seed):
        """Test greedy >= (1 - 1/e) of the exhaustive optimum."""
        gen = np.random.default_rng(seed)
        candidates = int(gen.integers(4, 13))
        k = int(gen.integers(1, min(candidates, 4) + 1))
        table = gen.uniform(-100, -60, size=(25, candidates))
        best = max(coverage_fraction(table, list(c)) for c in itertools.combinations(range(candidates), k))
        assert coverage_fraction(table, greedy_plan(table, k)) >= (1 - 1 / math.e) * best - 1e-12

    def test_k_range(self):
        """Test that K beyond the candidates is rejected."""
        with pytest.raises(ValueError, match="k must be"):
            greedy_plan(np.zeros((2, 2)), 3)


class TestStudies:
    """Test the end-to-end study helpers."""

    def test_localization_study(self, rng):
        """Test that exact queries are recovered by the dense and augmented databases."""
        positions = rng.uniform(0, 10, size=(40, 3))
        anchors = rng.uniform(0, 10, size=(6, 3))
        prints = -40.0 - 20.0 * np.log10(np.linalg.norm(positions[:, None] - anchors[None], axis=2) + 0.1)
        study = localization_study(positions, prints[:, :1], prints[:, 1:], prints, positions[:5], prints[:5], k=1)
        assert set(study.errors) == {"sparse", "augmented", "dense"}
        np.testing.assert_allclose(study.errors["dense"], 0.0, atol=1e-12)
        np.testing.assert_allclose(study.errors["augmented"], study.errors["dense"])
        rows = list(study.cdf_rows())
        assert len(rows) == 15

    def test_planning_study(self):
        """Test that a perfect model matches the full survey."""
        table = coverage_table([{0, 1, 2}, {2, 3}, {3, 4}], 5)
        positions = np.array([[0.5, 0.5, 0], [1.5, 0.5, 0], [2.5, 0.5, 0], [3.5, 0.5, 0], [4.5, 0.5, 0]])
        study = planning_study(table, table, table, positions, surveyed=[1], k=2, cell_size=1.0)
        assert study.selections["ours"] == study.selections["upper_bound"] == [0, 2]
        assert study.selections["survey_only"] == [1]
        assert study.coverage["ours"] == 1.0
        assert study.gaps["ours"] == 0.0
