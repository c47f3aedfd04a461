"""Fast invariant checks runnable without the test suite."""

from __future__ import annotations

import itertools
import math

import numpy as np

from .estimators import WeightedSample, snis_estimate
from .harness import lp_error
from .pointset import generate_iid, generate_sobol, scramble_owen, star_discrepancy
from .projection import ProjectionParams, project
from .transport import normal_cdf, normal_inv_cdf, student_t_cdf, student_t_inv_cdf


def _brute_discrepancy(x):
    n, d = x.shape
    grids = [np.unique(np.concatenate([x[:, j], [1.0]])) for j in range(d)]
    worst = 0.0
    for corner in itertools.product(*grids):
        c = np.array(corner)
        vol = float(np.prod(c))
        closed = np.count_nonzero(np.all(x <= c, axis=1)) / n
        opened = np.count_nonzero(np.all(x < c, axis=1)) / n
        worst = max(worst, closed - vol, vol - opened)
    return worst


def _check_quantiles():
    u = np.concatenate([np.linspace(1e-9, 1 - 1e-9, 2000), [1e-9, 1 - 1e-9]])
    assert np.max(np.abs(normal_cdf(normal_inv_cdf(u)) - u)) <= 1e-12
    assert np.max(np.abs(student_t_cdf(student_t_inv_cdf(u, 5.0), 5.0) - u)) <= 1e-10


def _check_stratification():
    for ps in (generate_sobol(2, 256), scramble_owen(generate_sobol(2, 256), 7)):
        for j in range(2):
            counts = np.bincount(np.floor(ps.points[:, j] * 256).astype(int), minlength=256)
            assert np.all(counts == 1)


def _check_discrepancy():
    for seed in range(5):
        x = generate_iid(2, 12, seed).points
        assert abs(star_discrepancy(x) - _brute_discrepancy(x)) <= 1e-12


def _check_snis():
    rng = np.random.default_rng(3)
    logw, f = rng.normal(size=100), rng.normal(size=100)
    a = snis_estimate(WeightedSample(None, logw, f)).value
    b = snis_estimate(WeightedSample(None, logw + 123.0, f)).value
    assert abs(a - b) <= 1e-12 * max(1.0, abs(a))
    assert f.min() <= a <= f.max()
    assert abs(snis_estimate(WeightedSample(None, np.zeros(100), f)).value - f.mean()) <= 1e-13


def _check_lp_monotone():
    est = np.random.default_rng(4).standard_t(3, size=50)
    l1, l2, l5 = (lp_error(est, p) for p in (1, 2, 5))
    assert l1 <= l2 <= l5


def _check_projection():
    params = ProjectionParams(r=3.0, delta=0.25, d=3)
    x = np.random.default_rng(5).normal(scale=2.5, size=(1000, 3))
    px = project(x, params)
    nx, npx = np.linalg.norm(x, axis=1), np.linalg.norm(px, axis=1)
    assert np.all(npx <= nx) and np.all(npx <= (1 - params.delta / 2) * params.r)


CHECKS = {
    "inverse-CDF round trips": _check_quantiles,
    "1D dyadic stratification": _check_stratification,
    "star discrepancy vs brute force": _check_discrepancy,
    "SNIS algebra": _check_snis,
    "L_p monotone in p": _check_lp_monotone,
    "projection norm bounds": _check_projection,
}


def run_selftest(verbose: bool = True) -> bool:
    ok = True
    for name, check in CHECKS.items():
        try:
            check()
            status = "PASS"
        except AssertionError:
            status, ok = "FAIL", False
        if verbose:
            print(f"{status}  {name}")
    return ok
