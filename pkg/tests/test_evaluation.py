import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stimpute.evaluation import (
    QUANTILE_LEVELS,
    ImputationResult,
    baseline_impute,
    crps_aggregate,
    crps_single,
    mae,
    mse,
    quantile_ranks,
    score,
)

from conftest import make_window


def crps_brute(samples, x):
    """19-term quantile-loss sum with the ceil(alpha * S)-th order statistic, in plain Python."""
    s = sorted(float(v) for v in samples)
    total = 0.0
    for i in range(1, 20):
        alpha = Fraction(i, 20)
        z = s[math.ceil(alpha * len(s)) - 1]
        indicator = 1.0 if x < z else 0.0
        total += 2.0 * (float(alpha) - indicator) * (x - z)
    return total / 19


class TestPointMetrics:
    def test_perfect(self):
        x = np.arange(6.0).reshape(2, 3)
        assert mae(x, x, np.ones_like(x)) == 0 and mse(x, x, np.ones_like(x)) == 0

    def test_constant_error(self):
        x = np.zeros((2, 3))
        m = np.ones((2, 3))
        assert mae(x + 2, x, m) == 2.0 and mse(x + 2, x, m) == 4.0

    def test_half_mask_against_loop(self, rng):
        pred, truth = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
        mask = np.zeros((4, 6), dtype=bool)
        mask[:, ::2] = True
        errs = [abs(pred[i, j] - truth[i, j]) for i in range(4) for j in range(6) if mask[i, j]]
        assert mae(pred, truth, mask) == pytest.approx(sum(errs) / len(errs), rel=1e-14)
        assert mse(pred, truth, mask) == pytest.approx(sum(e * e for e in errs) / len(errs), rel=1e-14)

    def test_empty_mask(self):
        with pytest.raises(ValueError):
            mae(np.zeros(2), np.zeros(2), np.zeros(2))


class TestCRPS:
    def test_grid(self):
        assert len(QUANTILE_LEVELS) == 19
        np.testing.assert_allclose(np.diff(QUANTILE_LEVELS), 0.05)
        assert QUANTILE_LEVELS[0] == 0.05 and QUANTILE_LEVELS[-1] == 0.95

    def test_ranks_use_exact_ceiling(self):
        # 0.15 * 100 is 15.000000000000002 in floating point; the 15th statistic is wanted
        assert quantile_ranks(100)[2] == 14
        for s in (1, 7, 20, 33, 100):
            assert list(quantile_ranks(s)) == [math.ceil(Fraction(i, 20) * s) - 1 for i in range(1, 20)]

    def test_degenerate_correct(self):
        assert crps_single(np.full(100, 3.0), 3.0) == 0.0

    def test_offset_by_one(self):
        assert abs(crps_single(np.full(100, 4.0), 3.0) - 1.0) <= 1e-12

    def test_random_cases_match_brute_force(self):
        rng = np.random.default_rng(99)
        for _ in range(100):
            s = rng.normal(size=100) * rng.uniform(0.1, 5)
            x = rng.normal() * 2
            assert abs(crps_single(s, x) - crps_brute(s, x)) <= 1e-9

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=40), st.floats(-1e3, 1e3))
    def test_property_matches_brute_force(self, samples, x):
        got = crps_single(np.array(samples), x)
        assert got >= 0
        assert math.isclose(got, crps_brute(samples, x), rel_tol=1e-9, abs_tol=1e-9)

    def test_empty(self):
        with pytest.raises(ValueError):
            crps_single(np.array([]), 0.0)

    def test_aggregate_mean(self):
        samples = np.zeros((10, 1, 2))
        samples[:, 0, 1] = 1.0
        truth = np.zeros((1, 2))
        assert crps_aggregate(samples, truth, np.ones((1, 2))) == pytest.approx(0.5, abs=1e-12)
        assert crps_aggregate(samples, truth, [[1, 0]]) == 0.0

    def test_single_cell_aggregate(self, rng):
        samples = rng.normal(size=(30, 2, 3))
        truth = rng.normal(size=(2, 3))
        mask = np.zeros((2, 3), dtype=bool)
        mask[1, 2] = True
        assert crps_aggregate(samples, truth, mask) == pytest.approx(crps_single(samples[:, 1, 2], truth[1, 2]), abs=1e-15)

    def test_scale_equivariance(self, rng):
        samples, truth = rng.normal(size=(50, 3, 4)), rng.normal(size=(3, 4))
        mask = np.ones((3, 4))
        assert crps_aggregate(2 * samples, 2 * truth, mask) == pytest.approx(2 * crps_aggregate(samples, truth, mask), rel=1e-12)
        med = np.median(samples, 0)
        assert mae(2 * med, 2 * truth, mask) == pytest.approx(2 * mae(med, truth, mask), rel=1e-12)

    def test_ignores_unmasked_cells(self, rng):
        samples, truth = rng.normal(size=(20, 3, 4)), rng.normal(size=(3, 4))
        mask = rng.random((3, 4)) < 0.5
        mask[0, 0] = True
        a = crps_aggregate(samples, truth, mask)
        s2, t2 = samples.copy(), truth.copy()
        s2[:, ~mask] += 100.0
        t2[~mask] -= 100.0
        assert crps_aggregate(s2, t2, mask) == a


class TestImputationResult:
    def test_median(self):
        samples = np.array([1.0, 2.0, 9.0]).reshape(3, 1, 1)
        r = ImputationResult.from_samples(samples, np.ones((1, 1)))
        assert r.point_estimate[0, 0] == 2.0

    def test_median_invariant_to_sample_order(self, rng):
        s = rng.normal(size=(11, 2, 3))
        a = ImputationResult.from_samples(s, np.ones((2, 3))).point_estimate
        b = ImputationResult.from_samples(s[rng.permutation(11)], np.ones((2, 3))).point_estimate
        np.testing.assert_array_equal(a, b)

    def test_score_keys(self, rng):
        s = rng.normal(size=(5, 2, 3))
        r = ImputationResult.from_samples(s, np.ones((2, 3)))
        out = score(r, np.zeros((2, 3)))
        assert set(out) == {"mae", "mse", "crps", "n_target_cells"} and out["n_target_cells"] == 6


class TestBaselines:
    def _masked(self, values, observed):
        observed = np.asarray(observed, dtype=np.int8)
        return make_window(values, observed=observed, target=1 - observed)

    def test_constant_series(self, rng):
        v = np.full((3, 20), 4.2)
        m = (rng.random((3, 20)) > 0.3).astype(int)
        m[:, 0] = 1
        w = self._masked(v, m)
        for method in ("mean", "linear"):
            assert mae(baseline_impute(w, method), v, w.target_mask) == pytest.approx(0.0, abs=1e-12)

    def test_linear_exact_on_ramp(self):
        v = np.tile(np.arange(12.0), (2, 1)) * [[1.0], [-0.5]]
        m = np.ones((2, 12), dtype=int)
        m[:, [2, 3, 7, 9]] = 0
        w = self._masked(v, m)
        assert mae(baseline_impute(w, "linear"), v, w.target_mask) == pytest.approx(0.0, abs=1e-12)

    def test_mean_worse_than_linear_on_sinusoid_blocks(self):
        l = np.arange(96)
        v = np.stack([np.sin(2 * np.pi * l / 48 + p) for p in (0.0, 1.0, 2.0)])
        m = np.ones_like(v, dtype=int)
        m[:, 20:32] = 0
        m[1, 60:70] = 0
        w = self._masked(v, m)
        err = {k: mae(baseline_impute(w, k), v, w.target_mask) for k in ("mean", "linear")}
        assert err["mean"] >= err["linear"]

    def test_observed_cells_unchanged(self, rng):
        v = rng.normal(size=(3, 10))
        m = (rng.random((3, 10)) > 0.5).astype(int)
        w = self._masked(v, m)
        for method in ("mean", "linear"):
            out = baseline_impute(w, method)
            np.testing.assert_array_equal(out[m == 1], v[m == 1])

    def test_empty_node_uses_global_mean(self):
        v = np.array([[1.0, 3.0], [5.0, 7.0]])
        w = self._masked(v, [[1, 1], [0, 0]])
        np.testing.assert_array_equal(baseline_impute(w, "mean")[1], [2.0, 2.0])

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            baseline_impute(make_window(np.ones((1, 2))), "spline")
