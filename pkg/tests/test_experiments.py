import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sinkdiv.datasets import iris_like, load_bundled_iris_like, ring_points
from sinkdiv.errors import InputError
from sinkdiv.experiments import (
    N_GRID,
    ComplexityRecord,
    default_t_grid,
    derived_rng,
    ellipse_experiment,
    estimate_rate,
    fmt,
    occupancy_table,
    positivity_experiment,
    positivity_scan,
    sample_complexity_run,
    write_complexity_csv,
    write_positivity_csv,
)
from sinkdiv.models import EllipseModel, LatentSampler, sample_latent
from sinkdiv.training import TrainConfig


def synthetic(R_of_N, N_list=N_GRID):
    return [ComplexityRecord(2, 1.0, 1.5, N, R_of_N(N), 0.0, 2) for N in N_list]


class TestDerivedRng:
    def test_reproducible_and_distinct(self):
        a = derived_rng(7, 10, 0, 0).random(3)
        np.testing.assert_array_equal(a, derived_rng(7, 10, 0, 0).random(3))
        assert not np.array_equal(a, derived_rng(7, 10, 1, 0).random(3))
        assert not np.array_equal(a, derived_rng(8, 10, 0, 0).random(3))


class TestEstimateRate:
    def test_inverse_power(self):
        fit = estimate_rate(synthetic(lambda N: 1.0 / N))
        assert abs(fit.kappa - 1.0) <= 1e-12
        assert fit.N_range == (10, 1000) and fit.points == 9

    def test_three_quarters(self):
        fit = estimate_rate(synthetic(lambda N: 3.0 * N ** -0.75))
        assert abs(fit.kappa - 0.75) <= 1e-12
        assert fit.intercept == pytest.approx(np.log10(3.0), abs=1e-12)

    @given(st.floats(0.05, 3.0), st.floats(1e-3, 1e3))
    @settings(max_examples=50)
    def test_exact_power_laws(self, kappa, scale):
        fit = estimate_rate(synthetic(lambda N: scale * N ** -kappa))
        assert abs(fit.kappa - kappa) <= 1e-10
        assert fit.residual <= 1e-10

    def test_drops_small_N(self):
        records = synthetic(lambda N: 1.0 / N, [2, 5, 10, 20, 40])
        records[0] = ComplexityRecord(2, 1.0, 1.5, 2, 100.0, 0.0, 2)
        fit = estimate_rate(records)
        assert fit.N_range == (10, 40) and abs(fit.kappa - 1.0) <= 1e-12

    def test_names_offending_N(self):
        records = synthetic(lambda N: 0.0 if N == 56 else 1.0 / N)
        with pytest.raises(InputError, match="N = 56"):
            estimate_rate(records)

    def test_needs_three_points(self):
        with pytest.raises(InputError):
            estimate_rate(synthetic(lambda N: 1.0 / N, [10, 20]))


class TestSampleComplexity:
    def test_single_dirac_matches_monte_carlo(self):
        records = sample_complexity_run(2, 1.0, 1.5, [1], replicates=400, seed=3)
        (rec,) = records
        rng = np.random.default_rng(12345)
        X, Y = rng.random((10 ** 6, 2)), rng.random((10 ** 6, 2))
        mc = 2 * np.mean(np.linalg.norm(X - Y, axis=1) ** 1.5)
        assert abs(rec.R - mc) <= 4 * rec.S / np.sqrt(rec.replicates)

    def test_single_dirac_values_are_twice_the_cost(self):
        (rec,) = sample_complexity_run(2, 0.5, 1.5, [1], replicates=5, seed=4)
        values = [2 * np.linalg.norm(derived_rng(4, 1, i, 0).random((1, 2)) - derived_rng(4, 1, i, 1).random((1, 2)))
                  ** 1.5 for i in range(5)]
        assert rec.R == pytest.approx(np.mean(values), rel=1e-12)

    def test_shared_streams_give_zero(self):
        records = sample_complexity_run(2, 1.0, 1.5, [5, 10], replicates=3, seed=0, shared_streams=True)
        assert all(r.R == 0.0 and r.S == 0.0 for r in records)

    def test_positive_and_reproducible(self):
        a = sample_complexity_run(2, 1.0, 1.5, [5, 10, 20], replicates=4, seed=9)
        b = sample_complexity_run(2, 1.0, 1.5, [5, 10, 20], replicates=4, seed=9)
        assert a == b
        assert all(r.R > 0 and r.S >= 0 for r in a)

    def test_replicate_independent_of_grid(self):
        a = sample_complexity_run(2, 1.0, 1.5, [5, 10], replicates=3, seed=2)
        b = sample_complexity_run(2, 1.0, 1.5, [10], replicates=3, seed=2)
        assert a[1] == b[0]

    def test_gaussian_base(self):
        (rec,) = sample_complexity_run(3, 1.0, 1.5, [8], replicates=3, seed=1, dist="gaussian")
        assert rec.R > 0 and rec.d == 3

    @pytest.mark.parametrize("kwargs", [{"replicates": 1}, {"N_list": [10, 5]}, {"N_list": [0, 5]},
                                        {"dist": "cauchy"}])
    def test_rejects(self, kwargs):
        base = {"d": 2, "epsilon": 1.0, "p": 1.5, "N_list": [2, 3], "replicates": 2}
        with pytest.raises(InputError):
            sample_complexity_run(**{**base, **kwargs})

    def test_csv(self, tmp_path):
        records = sample_complexity_run(2, 1.0, 1.5, [3, 6], replicates=2, seed=0)
        path = tmp_path / "r.csv"
        write_complexity_csv(path, records)
        rows = list(csv.reader(open(path, newline="")))
        assert rows[0] == ["N", "R", "S", "replicates", "d", "epsilon", "p"]
        assert float(rows[1][1]) == records[0].R
        assert rows[1][5] == "1.0" and rows[1][6] == "1.5"


class TestPositivity:
    def test_default_grid(self):
        t = default_t_grid()
        assert t.size == 41 and t[20] == 0.0 and t[0] == -0.2 and t[-1] == 0.2
        np.testing.assert_array_equal(t, -t[::-1])

    @pytest.mark.parametrize("args", [(0.2, 40), (0.0, 41), (0.2, 0)])
    def test_bad_grid(self, args):
        with pytest.raises(InputError):
            default_t_grid(*args)

    def test_grid_without_zero(self):
        with pytest.raises(InputError):
            positivity_scan(5, [0.1, 0.2], rng=np.random.default_rng(0))

    def test_grid_too_wide_for_weights(self):
        with pytest.raises(InputError):
            positivity_scan(5, [-5.0, 0.0, 5.0], rng=np.random.default_rng(0), max_resample=50)

    @pytest.mark.parametrize("p", [1.0, 1.8])
    def test_zero_at_origin_positive_elsewhere(self, p):
        for scan in positivity_experiment(10, p, 1.0, realizations=5, seed=1):
            zero = scan.t_grid == 0.0
            assert np.all(scan.values[zero] == 0.0)
            assert np.all(scan.values[~zero] > 0.0)
            assert np.argmin(scan.values) == np.flatnonzero(zero)[0]
            weights = [scan.measure_at(t).weights for t in scan.t_grid]
            assert all(w.min() > 0 for w in weights)

    def test_weights_follow_perturbation(self):
        scan = positivity_scan(6, default_t_grid(0.1, 5), rng=np.random.default_rng(2))
        mu_t = scan.measure_at(0.05)
        raw = scan.a + 0.05 * scan.b
        np.testing.assert_allclose(mu_t.weights, raw / raw.sum(), rtol=1e-14)
        np.testing.assert_array_equal(mu_t.points, scan.x + 0.05 * scan.z)
        assert np.all((scan.a >= 0.5) & (scan.a <= 1.0))
        assert np.all((scan.x >= 0) & (scan.x <= 1))

    def test_continuity_under_refinement(self):
        coarse = positivity_scan(8, default_t_grid(0.2, 11), rng=np.random.default_rng(3))
        fine = positivity_scan(8, default_t_grid(0.2, 21), rng=np.random.default_rng(3))
        np.testing.assert_array_equal(coarse.x, fine.x)
        np.testing.assert_allclose(fine.values[::2], coarse.values, rtol=1e-9, atol=1e-15)
        assert np.max(np.abs(np.diff(fine.values))) <= 0.6 * np.max(np.abs(np.diff(coarse.values)))

    def test_csv(self, tmp_path):
        scans = positivity_experiment(4, 1.0, 1.0, realizations=2, seed=0, t_grid=default_t_grid(0.1, 3))
        path = tmp_path / "pos.csv"
        write_positivity_csv(path, scans)
        rows = list(csv.reader(open(path, newline="")))
        assert rows[0] == ["t", "value", "realization"] and len(rows) == 7
        assert rows[2][:2] == ["0.0", "0.0"]


class TestEllipseExperiment:
    def test_ball_radius_recovered(self):
        rng = np.random.default_rng(0)
        Z, _ = sample_latent(LatentSampler("uniform-unit-ball-mixture", 2, 1), 400, rng)
        P = 2.0 * Z + np.array([1.0, -1.0])
        config = TrainConfig(epsilon=0.1, L=20, m=100, steps=300, learning_rate=0.02)
        result = ellipse_experiment(P, np.ones(400, dtype=int), K=1, config=config, dim=2)
        radii = np.linalg.svd(result.model.A[0], compute_uv=False)
        np.testing.assert_allclose(radii, 2.0, rtol=0.1)

    def test_center_counted_inside(self):
        model = EllipseModel(np.array([[[0.3, 0.0], [0.1, 0.2]], [[1.0, 0.0], [0.0, 1.0]]]),
                             np.array([[5.0, 5.0], [-5.0, 0.0]]))
        rows, singular = occupancy_table(model, np.array([[5.0, 5.0], [-5.0, 0.5]]), [1, 2])
        assert singular == []
        assert rows == [(0, 1, 1), (0, 2, 0), (1, 1, 0), (1, 2, 1)]

    def test_singular_counts_empty(self):
        model = EllipseModel(np.zeros((1, 2, 2)), np.zeros((1, 2)))
        rows, singular = occupancy_table(model, np.zeros((3, 2)), [1, 1, 2])
        assert singular == [0] and all(count == 0 for _, _, count in rows)

    def test_needs_labels(self):
        with pytest.raises(InputError):
            ellipse_experiment(np.zeros((10, 4)), None)

    def test_short_run_on_bundled_data(self):
        points, labels = load_bundled_iris_like()
        config = TrainConfig(epsilon=0.1, L=5, m=30, steps=5, learning_rate=1e-3)
        result = ellipse_experiment(points, labels, 3, config)
        assert result.projected.shape == (150, 3)
        assert len(result.table) == 9 and len(result.trace) == 5


class TestDatasets:
    def test_bundled_shape(self):
        points, labels = load_bundled_iris_like()
        assert points.shape == (150, 4)
        np.testing.assert_array_equal(np.bincount(labels)[1:], [50, 50, 50])

    def test_generator_deterministic(self):
        a, la = iris_like(np.random.default_rng(0))
        b, lb = iris_like(np.random.default_rng(0))
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(la, lb)

    def test_ring(self):
        X = ring_points(800, np.random.default_rng(0))
        radius = np.linalg.norm(X, axis=1)
        assert X.shape == (800, 2) and abs(np.median(radius) - 2.0) < 0.05
        angles = np.round(np.arctan2(X[:, 1], X[:, 0]) / (np.pi / 4)) % 8
        assert set(angles.astype(int)) == set(range(8))


class TestFmt:
    @pytest.mark.parametrize("value, text", [(0.0, "0.0"), (2.0, "2.0"), (0.1, "0.10000000000000001"),
                                             (1e-20, "9.9999999999999995e-21"), (float("inf"), "inf")])
    def test_examples(self, value, text):
        assert fmt(value) == text

    @given(st.floats(allow_nan=False, allow_infinity=False))
    def test_round_trip(self, value):
        assert float(fmt(value)) == value
