import csv
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from scipy import stats

from rqmc_snis.diagnostics import (
    CIResult,
    CoverageConfig,
    DegenerateSampleError,
    coverage_experiment,
    known_truth,
    sample_skewness_kurtosis,
    student_t_ci,
    write_coverage_csv,
)
from rqmc_snis.harness import ExperimentConfig, run_experiment

samples = hnp.arrays(np.float64, st.integers(4, 40), elements=st.floats(-100, 100))


def gaussian_sampler(R):
    return lambda seed: np.random.default_rng(seed).normal(size=R)


class TestShapeStatistics:
    def test_two_point(self):
        g, k = sample_skewness_kurtosis([-1.0, 1.0, -1.0, 1.0])
        assert g == 0.0 and k == 1.0

    def test_hand_values(self):
        g, k = sample_skewness_kurtosis([0.0, 0.0, 0.0, 1.0])
        assert g == pytest.approx((3 / 32) / (3 / 16) ** 1.5, rel=1e-14)
        assert k == pytest.approx((21 / 256) / (3 / 16) ** 2, rel=1e-14)
        assert g == pytest.approx(1.1547, abs=1e-4) and k == pytest.approx(2.3333, abs=1e-4)

    def test_matches_scipy(self):
        x = np.random.default_rng(0).gamma(2.0, size=30)
        g, k = sample_skewness_kurtosis(x)
        assert g == pytest.approx(stats.skew(x), rel=1e-12)
        assert k == pytest.approx(stats.kurtosis(x, fisher=False), rel=1e-12)

    def test_constant(self):
        with pytest.raises(DegenerateSampleError):
            sample_skewness_kurtosis([2.0] * 5)

    def test_too_few(self):
        with pytest.raises(ValueError):
            sample_skewness_kurtosis([1.0, 2.0, 3.0])

    @given(samples, st.floats(-50, 50), st.floats(0.1, 10), st.booleans())
    @settings(max_examples=100, deadline=None)
    def test_affine_behaviour(self, x, shift, scale, flip):
        assume(np.std(x) > 1e-3 * (1 + np.max(np.abs(x))))
        c = -scale if flip else scale
        g, k = sample_skewness_kurtosis(x)
        g2, k2 = sample_skewness_kurtosis(c * x + shift)
        assert g2 == pytest.approx(math.copysign(1.0, c) * g, rel=1e-6, abs=1e-6)
        assert k2 == pytest.approx(k, rel=1e-6)

    def test_toy_kurtosis_cap(self):
        cfg = ExperimentConfig(
            model={"kind": "gaussian_toy", "d": 5}, proposals=["G"], Ns=[256], ps=[2.0], R=50
        )
        for seed in range(3):
            cfg.master_seed = seed
            est = run_experiment(cfg).cells[0].estimates
            assert sample_skewness_kurtosis(est)[1] < 50


class TestStudentTInterval:
    def test_constant_values(self):
        ci = student_t_ci([1.5] * 6, 0.025)
        assert ci.center == 1.5 and ci.half_width == 0.0

    def test_two_values(self):
        ci = student_t_ci([0.0, 2.0], 0.025)
        assert ci.center == 1.0
        assert ci.half_width == pytest.approx(12.7062, abs=1e-4)
        # one degree of freedom: the Cauchy quantile tan(pi (u - 1/2))
        assert ci.half_width == pytest.approx(math.tan(math.pi * 0.475), rel=1e-13)
        assert ci.nominal == pytest.approx(0.95)

    def test_scale_equivariance(self):
        x = np.random.default_rng(1).normal(size=8)
        a, b = student_t_ci(x, 0.05), student_t_ci(2 * x, 0.05)
        assert b.center == pytest.approx(2 * a.center, rel=1e-14)
        assert b.half_width == pytest.approx(2 * a.half_width, rel=1e-14)

    def test_covered_flag(self):
        assert student_t_ci([0.0, 1.0, 2.0], 0.025, truth=1.0).covered
        assert not student_t_ci([0.0, 1.0, 2.0], 0.025, truth=100.0).covered
        assert student_t_ci([0.0, 1.0, 2.0], 0.025).covered is None

    def test_half_width_decreases_in_R(self):
        # unit-variance samples of growing size: only t and sqrt(R) change
        widths = []
        for R in range(2, 30):
            x = np.zeros(R)
            x[0], x[1] = math.sqrt((R - 1) / 2), -math.sqrt((R - 1) / 2)
            assert np.std(x, ddof=1) == pytest.approx(1.0)
            widths.append(student_t_ci(x, 0.025).half_width)
        assert np.all(np.diff(widths) < 0)

    def test_validation(self):
        with pytest.raises(ValueError):
            student_t_ci([1.0], 0.025)
        with pytest.raises(ValueError):
            student_t_ci([1.0, 2.0], 0.0)
        with pytest.raises(ValueError):
            CIResult(0.0, -1.0, 0.95)


class TestCoverage:
    def test_gaussian_values(self):
        res = coverage_experiment(gaussian_sampler(10), 0.0, 2000, 0.025)
        assert 0.94 <= res.empirical <= 0.96
        assert res.R == 10 and res.meta_reps == 2000

    def test_zero_width_intervals(self):
        res = coverage_experiment(gaussian_sampler(10), 0.0, 500, 0.5)
        assert res.empirical <= 0.1

    def test_truth_far_away(self):
        assert coverage_experiment(gaussian_sampler(10), 1e6, 200, 0.025).empirical == 0.0

    def test_toy_config(self):
        cfg = CoverageConfig(model={"kind": "gaussian_toy", "d": 3}, proposal="G", N=64, R=6, meta_reps=40)
        res = coverage_experiment(cfg, known_truth(cfg.model))
        assert res.model == "gaussian_toy_d3" and res.N == 64 and res.R == 6
        assert 0.0 <= res.empirical <= 1.0 and res.hits == round(res.empirical * 40)

    def test_threads_match_serial(self):
        cfg = CoverageConfig(model={"kind": "gaussian_toy", "d": 2}, proposal="G", N=32, R=4, meta_reps=20)
        a = coverage_experiment(cfg, 2.0, threads=1)
        b = coverage_experiment(cfg, 2.0, threads=4)
        assert [ci.center for ci in a.intervals] == [ci.center for ci in b.intervals]

    def test_known_truth(self):
        assert known_truth({"kind": "gaussian_toy", "d": 7}) == 7.0
        assert known_truth({"kind": "inverse_problem", "d": 5, "n": 20, "kappa": 1.0}) == pytest.approx(110 / 441)
        with pytest.raises(ValueError):
            known_truth({"kind": "logistic"})

    def test_csv(self, tmp_path):
        res = coverage_experiment(gaussian_sampler(5), 0.0, 50, 0.025)
        write_coverage_csv(res, tmp_path)
        with open(tmp_path / "coverage.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == ["nominal", "empirical", "meta_reps", "R", "N", "model", "proposal"]
        assert float(rows[0]["empirical"]) == res.empirical and rows[0]["R"] == "5"
