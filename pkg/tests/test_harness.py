import csv
import json
import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rqmc_snis.harness import (
    ERRORS_COLUMNS,
    RATES_COLUMNS,
    ExperimentConfig,
    LpErrorReport,
    Problem,
    build_problem,
    emit_report,
    fit_rate,
    lp_error,
    read_errors_csv,
    replicate_seed,
    run_experiment,
)
from rqmc_snis.pointset import PRNG_ALGORITHM
from rqmc_snis.transport import gaussian_map

SMALL_INVERSE = {"kind": "inverse_problem", "d": 2, "n": 20, "kappa": 0.25}


def small_config(**kw):
    base = dict(model=SMALL_INVERSE, proposals=["tIS", "LapIS"], Ns=[32, 64, 128], ps=[1, 2, 5], R=4, master_seed=3)
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def small_report():
    return run_experiment(small_config())


class TestConfig:
    def test_defaults(self):
        cfg = ExperimentConfig(model=SMALL_INVERSE, proposals=["tIS"])
        assert cfg.R == 50 and cfg.ps == [1.0, 2.0, 5.0]
        assert cfg.Ns == [2**k for k in range(8, 15)]

    @pytest.mark.parametrize(
        "kw",
        [dict(R=1), dict(Ns=[64, 32]), dict(Ns=[32, 32]), dict(ps=[0.5]), dict(randomization="halton"), dict(proposals=[])],
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            small_config(**kw)

    def test_json_mirrors_fields(self, tmp_path):
        cfg = small_config()
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg.to_dict()))
        assert ExperimentConfig.from_json(path) == cfg

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown"):
            ExperimentConfig.from_dict({"model": SMALL_INVERSE, "proposals": ["tIS"], "Rs": 3})

    def test_unknown_model(self):
        with pytest.raises(ValueError):
            build_problem({"kind": "ising"}, ["tIS"])


class TestFitRate:
    @pytest.mark.parametrize("rate", [1.0, 0.5])
    def test_exact_power_law(self, rate):
        x = np.arange(8, 15, dtype=float)
        slope, intercept, resid = fit_rate(x, math.log2(3.0) - rate * x)
        assert abs(slope + rate) <= 1e-12
        assert intercept == pytest.approx(math.log2(3.0), abs=1e-12)
        assert resid <= 1e-12

    def test_log_corrected_rate(self):
        x = np.arange(8, 17, dtype=float)
        slope, _, _ = fit_rate(x, np.log2(0.7 * 2.0**-x * x**2))
        assert -1.0 < slope < -0.7

    def test_needs_three_points(self):
        with pytest.raises(ValueError):
            fit_rate([1.0, 2.0], [0.0, -1.0])


class TestLpError:
    def test_hand_value(self):
        est = np.array([1.0, 3.0])
        assert lp_error(est, 1) == 1.0 and lp_error(est, 2) == 1.0

    def test_tiny_deviations_do_not_underflow(self):
        est = np.array([0.0, 2.8153175744942573e-293])
        assert lp_error(est, 5) == pytest.approx(1.4076587872471286e-293, rel=1e-12)

    @given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=60), st.randoms())
    @settings(max_examples=100, deadline=None)
    def test_monotone_and_permutation_invariant(self, vals, rnd):
        est = np.array(vals)
        l1, l2, l5 = (lp_error(est, p) for p in (1, 2, 5))
        assert l1 <= l2 * (1 + 1e-12) + 1e-300 and l2 <= l5 * (1 + 1e-12) + 1e-300
        perm = est.copy()
        rnd.shuffle(perm)
        assert lp_error(perm, 2) == pytest.approx(l2, rel=1e-9, abs=1e-12)


class TestRunExperiment:
    def test_cells_and_rates(self, small_report):
        assert len(small_report.cells) == 6
        assert {(r.proposal, r.p) for r in small_report.rates} == {(p, q) for p in ("tIS", "LapIS") for q in (1.0, 2.0, 5.0)}
        cell = small_report.cell("tIS", 64)
        assert cell.estimates.shape == (4,) and cell.ess.shape == (4,)
        assert cell.mean_estimate == pytest.approx(np.mean(cell.estimates))
        assert cell.lp[2.0] == lp_error(cell.estimates, 2.0)

    def test_lp_monotone(self, small_report):
        small_report.check_lp_monotone()
        for c in small_report.cells:
            assert c.lp[1.0] <= c.lp[2.0] <= c.lp[5.0]

    def test_deterministic(self, small_report):
        again = run_experiment(small_config())
        for a, b in zip(small_report.cells, again.cells):
            np.testing.assert_array_equal(a.estimates, b.estimates)
            np.testing.assert_array_equal(a.ess, b.ess)
        assert [r.slope for r in small_report.rates] == [r.slope for r in again.rates]

    def test_threads_do_not_change_results(self, small_report, monkeypatch):
        monkeypatch.delenv("RQMC_SNIS_THREADS", raising=False)
        threaded = run_experiment(small_config(), threads=3)
        for a, b in zip(small_report.cells, threaded.cells):
            np.testing.assert_array_equal(a.estimates, b.estimates)

    def test_env_overrides_threads(self, monkeypatch):
        from rqmc_snis.harness import resolve_threads

        monkeypatch.setenv("RQMC_SNIS_THREADS", "5")
        assert resolve_threads(2) == 5
        monkeypatch.delenv("RQMC_SNIS_THREADS")
        assert resolve_threads(2) == 2 and resolve_threads(None) == 1

    def test_seed_isolation(self, small_report):
        alone = run_experiment(small_config(proposals=["LapIS"], Ns=[64, 256, 512]))
        np.testing.assert_array_equal(alone.cell("LapIS", 64).estimates, small_report.cell("LapIS", 64).estimates)

    def test_replicate_seeds_distinct(self):
        seeds = {replicate_seed(0, p, n, r) for p in ("tIS", "LapIS") for n in (64, 128) for r in range(50)}
        assert len(seeds) == 200

    def test_master_seed_changes_results(self, small_report):
        other = run_experiment(small_config(master_seed=4))
        assert not np.array_equal(other.cells[0].estimates, small_report.cells[0].estimates)

    def test_gaussian_toy_iid(self):
        cfg = ExperimentConfig(
            model={"kind": "gaussian_toy", "d": 5},
            proposals=["Gaussian"],
            Ns=[64, 256, 1024, 4096],
            ps=[2.0],
            R=20,
            randomization="iid",
        )
        report = run_experiment(cfg)
        for c in report.cells:
            np.testing.assert_array_equal(c.ess, float(c.N))
        lps = [c.lp[2.0] for c in report.cells]
        assert lps[-1] < lps[0]
        assert -0.8 < report.rate("Gaussian", 2.0).slope < -0.3

    def test_toy_snis_is_plain_mean(self):
        from rqmc_snis.estimators import rqmc_integrate, snis_estimate, squared_norm
        from rqmc_snis.harness import make_pointset

        problem = build_problem({"kind": "gaussian_toy", "d": 3}, ["Gaussian"])
        ps = make_pointset("owen", 3, 128, 9)
        value = snis_estimate(problem.sample("Gaussian", ps)).value
        assert value == rqmc_integrate(squared_norm, problem.proposals["Gaussian"], ps)

    def test_failed_cell_is_labelled(self):
        bad = Problem("broken", 2, {"G": gaussian_map(np.zeros(2), np.eye(2))}, lambda x: np.full(len(x), np.nan))
        cfg = ExperimentConfig(model={"kind": "gaussian_toy", "d": 2}, proposals=["G"], Ns=[8, 16, 32], ps=[2.0], R=2)
        report = run_experiment(cfg, problem=bad)
        assert len(report.failures) == 3
        assert report.failures[0].error.startswith("broken/G/N=8")
        assert report.rates == []


class TestEmitReport:
    def test_files(self, small_report, tmp_path):
        out = emit_report(small_report, tmp_path / "out")
        names = {p.name for p in out.iterdir()}
        assert {"errors.csv", "rates.csv", "config.json", "replicates.csv"} <= names
        for p in (1, 2, 5):
            assert f"{small_report.model}_p{p}.svg" in names
            assert f"{small_report.model}_p{p}.gp" in names
        config = json.loads((out / "config.json").read_text())
        assert config["resolved"]["prng"] == PRNG_ALGORITHM
        assert config["R"] == 4 and config["proposals"] == ["tIS", "LapIS"]

    def test_errors_round_trip(self, small_report, tmp_path):
        emit_report(small_report, tmp_path)
        rows = read_errors_csv(tmp_path / "errors.csv")
        assert len(rows) == 6 * 3
        for row in rows:
            cell = small_report.cell(row["proposal"], row["N"])
            assert row["Lp"] == cell.lp[row["p"]]
            assert row["mean_estimate"] == cell.mean_estimate
            assert row["ess_mean"] == cell.ess_mean
            assert row["R"] == 4 and row["seed"] == 3 and row["model"] == small_report.model

    def test_rates_csv(self, small_report, tmp_path):
        emit_report(small_report, tmp_path)
        with open(tmp_path / "rates.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == RATES_COLUMNS
        fit = small_report.rate(rows[0]["proposal"], float(rows[0]["p"]))
        assert float(rows[0]["slope"]) == fit.slope

    def test_empty_report(self, tmp_path):
        report = LpErrorReport("empty", small_config())
        emit_report(report, tmp_path)
        assert (tmp_path / "errors.csv").read_text().strip() == ",".join(ERRORS_COLUMNS)
        assert (tmp_path / "rates.csv").read_text().strip() == ",".join(RATES_COLUMNS)

    def test_one_cell_report(self, tmp_path):
        cfg = small_config(proposals=["tIS"], Ns=[64], ps=[2.0])
        report = run_experiment(cfg)
        emit_report(report, tmp_path)
        assert len((tmp_path / "errors.csv").read_text().strip().splitlines()) == 2
        svg = ET.parse(tmp_path / f"{report.model}_p2.svg").getroot()
        points = [el for el in svg.iter() if el.get("class") == "point"]
        assert len(points) == 1

    def test_svg_one_series_per_proposal(self, small_report, tmp_path):
        emit_report(small_report, tmp_path)
        svg = ET.parse(tmp_path / f"{small_report.model}_p2.svg").getroot()
        ns = "{http://www.w3.org/2000/svg}"
        assert len(svg.findall(f"{ns}polyline")) == 2
        assert len([el for el in svg.iter() if el.get("class") == "point"]) == 6

    def test_unwritable(self, small_report, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError, match="file"):
            emit_report(small_report, blocker / "sub")
