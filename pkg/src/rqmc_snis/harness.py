"""Replicated L_p-error experiments.

For every ``(proposal, N)`` cell, ``R`` independently randomized point sets
produce ``R`` SNIS estimates ``e_r``.  With ``e_bar`` their mean, the
empirical error is ``L_p = (mean_r |e_r - e_bar|^p)^(1/p)``; slopes of
``log2 L_p`` against ``log2 N`` summarize the convergence rate.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .estimators import EvaluationError, WeightedSample, snis_estimate, squared_norm
from .models import (
    InverseProblemSpec,
    LogisticSpec,
    build_logistic_proposal,
    build_proposal,
    inverse_problem_log_unnorm_target,
    laplace_fit,
    load_pima,
    logistic_log_posterior,
)
from .pointset import PRNG_ALGORITHM, PointSet, digital_shift, generate_iid, generate_sobol, scramble_owen
from .transport import TransportMap, gaussian_map

__all__ = [
    "CellResult",
    "ExperimentConfig",
    "LpErrorReport",
    "Problem",
    "RateFit",
    "build_problem",
    "emit_report",
    "fit_rate",
    "lp_error",
    "make_pointset",
    "read_errors_csv",
    "replicate_seed",
    "run_cell",
    "run_experiment",
]

log = logging.getLogger(__name__)

RANDOMIZATIONS = ("owen", "digital_shift", "iid")
THREADS_ENV = "RQMC_SNIS_THREADS"

ERRORS_COLUMNS = ["model", "proposal", "N", "p", "Lp", "mean_estimate", "ess_mean", "R", "seed"]
RATES_COLUMNS = ["proposal", "p", "slope", "intercept", "residual"]


# ---------------------------------------------------------------------------
# Configuration and problems
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    """Resolved experiment description; the JSON config mirrors these fields.

    ``model`` is a dict with ``kind`` one of ``inverse_problem`` (keys ``d``,
    ``n``, ``kappa``), ``logistic`` (key ``path``, ``null`` for the bundled
    data) or ``gaussian_toy`` (key ``d``; target equals the proposal).
    """

    model: dict
    proposals: list[str]
    Ns: list[int] = field(default_factory=lambda: [2**k for k in range(8, 15)])
    ps: list[float] = field(default_factory=lambda: [1.0, 2.0, 5.0])
    R: int = 50
    master_seed: int = 0
    randomization: str = "owen"
    output_dir: str | None = None

    def __post_init__(self):
        if self.R < 2:
            raise ValueError("R must be at least 2")
        if any(b <= a for a, b in zip(self.Ns, self.Ns[1:])):
            raise ValueError("Ns must be strictly increasing")
        if any(n < 1 for n in self.Ns):
            raise ValueError("Ns must be positive")
        if any(p < 1 for p in self.ps):
            raise ValueError("every p must be at least 1")
        if self.randomization not in RANDOMIZATIONS:
            raise ValueError(f"randomization must be one of {RANDOMIZATIONS}")
        if not self.proposals:
            raise ValueError("at least one proposal is required")
        self.Ns = [int(n) for n in self.Ns]
        self.ps = [float(p) for p in self.ps]

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Problem:
    """A target, named proposals and a test function, ready for sampling."""

    label: str
    d: int
    proposals: dict[str, TransportMap]
    log_target: Callable[[np.ndarray], np.ndarray] | None
    f: Callable[[np.ndarray], np.ndarray] = squared_norm
    info: dict = field(default_factory=dict)

    def sample(self, proposal: str, ps: PointSet) -> WeightedSample:
        T = self.proposals[proposal]
        x, logq = T.forward_with_logdensity(ps.points)
        if self.log_target is None:
            logw = np.zeros(len(x))
        else:
            logw = self.log_target(x) - logq
        return WeightedSample(x, logw, self.f(x))


def build_problem(model: dict, proposals: list[str]) -> Problem:
    kind = model.get("kind")
    if kind == "inverse_problem":
        spec = InverseProblemSpec(int(model["d"]), float(model.get("n", 20.0)), float(model["kappa"]))
        maps = {k: build_proposal(k, spec).transport() for k in proposals}
        label = f"inverse_d{spec.d}_n{spec.n:g}_kappa{spec.kappa:g}"
        return Problem(
            label, spec.d, maps, lambda x: inverse_problem_log_unnorm_target(x, spec), info={"lambda": spec.lam}
        )
    if kind == "logistic":
        spec: LogisticSpec = load_pima(model.get("path"))
        fit = laplace_fit(spec)
        maps = {k: build_logistic_proposal(k, spec, fit).transport() for k in proposals}
        return Problem(
            "logistic_pima",
            spec.d,
            maps,
            lambda b: logistic_log_posterior(b, spec),
            info={"mu_star": fit[0].tolist(), "m": spec.m},
        )
    if kind == "gaussian_toy":
        d = int(model["d"])
        maps = {k: gaussian_map(np.zeros(d), np.eye(d)) for k in proposals}
        return Problem(f"gaussian_toy_d{d}", d, maps, None, info={"truth": float(d)})
    raise ValueError(f"unknown model kind {kind!r}")


# ---------------------------------------------------------------------------
# Replicates
# ---------------------------------------------------------------------------


def replicate_seed(master_seed: int, proposal: str, N: int, r: int) -> int:
    """64-bit seed for replicate ``r`` of cell ``(proposal, N)``."""
    ss = np.random.SeedSequence([int(master_seed), zlib.crc32(proposal.encode()), int(N), int(r)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def make_pointset(randomization: str, d: int, N: int, seed: int) -> PointSet:
    if randomization == "owen":
        return scramble_owen(generate_sobol(d, N), seed)
    if randomization == "digital_shift":
        return digital_shift(generate_sobol(d, N), seed)
    if randomization == "iid":
        return generate_iid(d, N, seed)
    raise ValueError(f"unknown randomization {randomization!r}")


def lp_error(estimates, p: float) -> float:
    est = np.asarray(estimates, dtype=np.float64)
    dev = np.abs(est - np.sum(est) / est.size)
    scale = float(np.max(dev))
    if scale == 0.0:
        return 0.0
    # scale first so dev**p neither underflows nor overflows
    return scale * float((np.sum((dev / scale) ** p) / est.size) ** (1.0 / p))


@dataclass
class CellResult:
    proposal: str
    N: int
    estimates: np.ndarray
    ess: np.ndarray
    lp: dict[float, float]
    error: str | None = None

    @property
    def mean_estimate(self) -> float:
        return float(np.sum(self.estimates) / self.estimates.size) if self.estimates.size else math.nan

    @property
    def ess_mean(self) -> float:
        return float(np.mean(self.ess)) if self.ess.size else math.nan


@dataclass
class RateFit:
    proposal: str
    p: float
    slope: float
    intercept: float
    residual: float


@dataclass
class LpErrorReport:
    model: str
    config: ExperimentConfig
    cells: list[CellResult] = field(default_factory=list)
    rates: list[RateFit] = field(default_factory=list)
    info: dict = field(default_factory=dict)

    def cell(self, proposal: str, N: int) -> CellResult:
        for c in self.cells:
            if c.proposal == proposal and c.N == N:
                return c
        raise KeyError((proposal, N))

    def rate(self, proposal: str, p: float) -> RateFit:
        for r in self.rates:
            if r.proposal == proposal and r.p == float(p):
                return r
        raise KeyError((proposal, p))

    @property
    def failures(self) -> list[CellResult]:
        return [c for c in self.cells if c.error is not None]

    def check_lp_monotone(self, rtol: float = 1e-12) -> None:
        """Power-mean inequality: ``L_p`` is nondecreasing in ``p`` per cell."""
        for c in self.cells:
            if c.error:
                continue
            vals = [c.lp[p] for p in sorted(c.lp)]
            for a, b in zip(vals, vals[1:]):
                if b < a * (1.0 - rtol):
                    raise AssertionError(f"L_p not monotone in p for {c.proposal}, N={c.N}: {vals}")


def _one_replicate(problem, cfg, proposal, N, r):
    seed = replicate_seed(cfg.master_seed, proposal, N, r)
    ps = make_pointset(cfg.randomization, problem.d, N, seed)
    res = snis_estimate(problem.sample(proposal, ps))
    return res.value, res.ess


def run_cell(problem: Problem, cfg: ExperimentConfig, proposal: str, N: int, pool=None) -> CellResult:
    """Run the ``R`` replicates of one cell; failures are recorded, not raised."""
    jobs = [(problem, cfg, proposal, N, r) for r in range(cfg.R)]
    try:
        out = list(pool.map(lambda a: _one_replicate(*a), jobs)) if pool else [_one_replicate(*a) for a in jobs]
    except EvaluationError as exc:
        msg = f"{problem.label}/{proposal}/N={N}: {exc}"
        log.error("cell aborted: %s", msg)
        return CellResult(proposal, N, np.empty(0), np.empty(0), {p: math.nan for p in cfg.ps}, msg)
    est = np.array([v for v, _ in out])
    ess = np.array([e for _, e in out])
    return CellResult(proposal, N, est, ess, {p: lp_error(est, p) for p in cfg.ps})


def resolve_threads(threads: int | None) -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        return max(1, int(env))
    return max(1, int(threads or 1))


def run_experiment(cfg: ExperimentConfig, threads: int | None = None, problem: Problem | None = None) -> LpErrorReport:
    problem = problem or build_problem(cfg.model, cfg.proposals)
    report = LpErrorReport(problem.label, cfg, info=dict(problem.info))
    nthreads = resolve_threads(threads)
    pool = ThreadPoolExecutor(nthreads) if nthreads > 1 else None
    try:
        for proposal in cfg.proposals:
            for N in cfg.Ns:
                cell = run_cell(problem, cfg, proposal, N, pool)
                log.info("%s %s N=%d L_2=%.4g", problem.label, proposal, N, cell.lp.get(2.0, math.nan))
                report.cells.append(cell)
    finally:
        if pool:
            pool.shutdown()
    report.rates = fit_rates(report.cells, cfg.ps)
    report.check_lp_monotone()
    return report


# ---------------------------------------------------------------------------
# Rates
# ---------------------------------------------------------------------------


def fit_rate(log2N, log2err) -> tuple[float, float, float]:
    """Least-squares line through ``(log2 N, log2 L_p)``.

    Returns ``(slope, intercept, residual)``, the residual being the root
    mean square deviation from the fitted line.
    """
    x = np.asarray(log2N, dtype=np.float64)
    y = np.asarray(log2err, dtype=np.float64)
    if x.size < 3 or x.shape != y.shape:
        raise ValueError("fit_rate needs at least 3 paired points")
    A = np.column_stack([x, np.ones_like(x)])
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - (slope * x + intercept)
    return float(slope), float(intercept), float(np.sqrt(np.mean(resid**2)))


def fit_rates(cells: list[CellResult], ps) -> list[RateFit]:
    fits = []
    proposals = list(dict.fromkeys(c.proposal for c in cells))
    for prop in proposals:
        ok = sorted((c for c in cells if c.proposal == prop and not c.error), key=lambda c: c.N)
        for p in ps:
            pts = [(c.N, c.lp[p]) for c in ok if c.lp[p] > 0]
            if len(pts) < 3:
                continue
            slope, icpt, res = fit_rate([math.log2(n) for n, _ in pts], [math.log2(e) for _, e in pts])
            fits.append(RateFit(prop, float(p), slope, icpt, res))
    return fits


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    return format(v, ".17g") if isinstance(v, float) else str(v)


def emit_report(report: LpErrorReport, output_dir: str | Path) -> Path:
    out = Path(output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "errors.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(ERRORS_COLUMNS)
            for c in report.cells:
                if c.error:
                    continue
                for p in report.config.ps:
                    w.writerow(
                        [_fmt(v) for v in (report.model, c.proposal, c.N, float(p), c.lp[p],
                                           c.mean_estimate, c.ess_mean, report.config.R, report.config.master_seed)]
                    )
        with open(out / "rates.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(RATES_COLUMNS)
            for r in report.rates:
                w.writerow([_fmt(v) for v in (r.proposal, r.p, r.slope, r.intercept, r.residual)])
        with open(out / "replicates.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["proposal", "N", "replicate", "estimate", "ess"])
            for c in report.cells:
                for r, (e, s) in enumerate(zip(c.estimates, c.ess)):
                    w.writerow([c.proposal, c.N, r, _fmt(float(e)), _fmt(float(s))])
        if report.failures:
            (out / "failures.txt").write_text("\n".join(c.error for c in report.failures) + "\n")
        config = report.config.to_dict()
        config["resolved"] = {
            "model_label": report.model,
            "prng": PRNG_ALGORITHM,
            "package_version": __version__,
            "replicate_seed": "SeedSequence([master_seed, crc32(proposal), N, r])",
            "info": report.info,
        }
        (out / "config.json").write_text(json.dumps(config, indent=2) + "\n")
        for p in report.config.ps:
            stem = f"{report.model}_p{p:g}"
            series = {}
            for c in report.cells:
                if not c.error and c.lp[p] > 0:
                    series.setdefault(c.proposal, []).append((math.log2(c.N), math.log2(c.lp[p])))
            (out / f"{stem}.svg").write_text(_svg_plot(series, f"{report.model}, p = {p:g}"))
            _write_gnuplot(out, stem, series, p)
    except OSError as exc:
        raise OSError(f"cannot write report to {out}: {exc}") from exc
    return out


def read_errors_csv(path: str | Path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append(
                {
                    "model": row["model"],
                    "proposal": row["proposal"],
                    "N": int(row["N"]),
                    "p": float(row["p"]),
                    "Lp": float(row["Lp"]),
                    "mean_estimate": float(row["mean_estimate"]),
                    "ess_mean": float(row["ess_mean"]),
                    "R": int(row["R"]),
                    "seed": int(row["seed"]),
                }
            )
    return rows


def rates_from_errors(rows: list[dict]) -> list[RateFit]:
    fits = []
    keys = list(dict.fromkeys((r["proposal"], r["p"]) for r in rows))
    for prop, p in keys:
        pts = sorted((r["N"], r["Lp"]) for r in rows if r["proposal"] == prop and r["p"] == p and r["Lp"] > 0)
        if len(pts) < 3:
            continue
        slope, icpt, res = fit_rate([math.log2(n) for n, _ in pts], [math.log2(e) for _, e in pts])
        fits.append(RateFit(prop, p, slope, icpt, res))
    return fits


_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"]
_MARKERS = ["circle", "square", "diamond", "triangle", "circle", "square", "diamond"]


def _svg_plot(series: dict[str, list[tuple[float, float]]], title: str) -> str:
    W, H, left, right, top, bottom = 640, 440, 70, 150, 40, 55
    pts = [pt for s in series.values() for pt in s]
    if pts:
        xs, ys = [p[0] for p in pts], [p[1] for p in pts]
        x0, x1 = math.floor(min(xs)), math.ceil(max(xs))
        y0, y1 = math.floor(min(ys)) - 1, math.ceil(max(ys)) + 1
    else:
        x0, x1, y0, y1 = 0, 1, 0, 1
    x1 = max(x1, x0 + 1)
    y1 = max(y1, y0 + 1)
    pw, ph = W - left - right, H - top - bottom

    def sx(x):
        return left + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return top + (y1 - y) / (y1 - y0) * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" '
        'font-family="sans-serif" font-size="12">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{left + pw / 2}" y="22" text-anchor="middle" font-size="14">{title}</text>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
        f'<text x="{left + pw / 2}" y="{H - 12}" text-anchor="middle">log2 N</text>',
        f'<text transform="translate(18,{top + ph / 2}) rotate(-90)" text-anchor="middle">log2 L_p</text>',
    ]
    ystep = max(1, (y1 - y0) // 8)
    for x in range(x0, x1 + 1):
        parts.append(f'<line x1="{sx(x):.1f}" y1="{top + ph}" x2="{sx(x):.1f}" y2="{top + ph + 5}" stroke="black"/>')
        parts.append(f'<text x="{sx(x):.1f}" y="{top + ph + 18}" text-anchor="middle">{x}</text>')
    for y in range(y0, y1 + 1, ystep):
        parts.append(f'<line x1="{left - 5}" y1="{sy(y):.1f}" x2="{left}" y2="{sy(y):.1f}" stroke="black"/>')
        parts.append(f'<text x="{left - 8}" y="{sy(y) + 4:.1f}" text-anchor="end">{y}</text>')
    for k, (name, s) in enumerate(series.items()):
        color = _PALETTE[k % len(_PALETTE)]
        s = sorted(s)
        if len(s) > 1:
            path = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in s)
            parts.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for x, y in s:
            parts.append(_marker(_MARKERS[k % len(_MARKERS)], sx(x), sy(y), color, "point"))
        ly = top + 10 + 18 * k
        parts.append(_marker(_MARKERS[k % len(_MARKERS)], left + pw + 18, ly, color, "legend"))
        parts.append(f'<text x="{left + pw + 28}" y="{ly + 4}">{name}</text>')
    parts.append("</svg>\n")
    return "\n".join(parts)


def _marker(kind, x, y, color, role, r=3.5):
    attrs = f'class="{role}" fill="{color}"'
    if kind == "square":
        return f'<rect x="{x - r:.1f}" y="{y - r:.1f}" width="{2 * r}" height="{2 * r}" {attrs}/>'
    if kind == "diamond":
        return f'<polygon points="{x:.1f},{y - r - 1:.1f} {x + r + 1:.1f},{y:.1f} {x:.1f},{y + r + 1:.1f} {x - r - 1:.1f},{y:.1f}" {attrs}/>'
    if kind == "triangle":
        return f'<polygon points="{x:.1f},{y - r - 1:.1f} {x + r + 1:.1f},{y + r:.1f} {x - r - 1:.1f},{y + r:.1f}" {attrs}/>'
    return f'<circle cx="{x:.1f}" cy="{y:.1f}" r="{r}" {attrs}/>'


def _write_gnuplot(out: Path, stem: str, series, p) -> None:
    dat = out / f"{stem}.dat"
    with open(dat, "w") as fh:
        for name, s in series.items():
            fh.write(f'"{name}"\n')
            for x, y in sorted(s):
                fh.write(f"{x:.17g} {y:.17g}\n")
            fh.write("\n\n")
    plots = ", ".join(f'"{dat.name}" index {i} with linespoints title "{name}"' for i, name in enumerate(series))
    script = (
        f'set terminal svg size 640,440\nset output "{stem}_gnuplot.svg"\n'
        f'set xlabel "log2 N"\nset ylabel "log2 L_p"\nset title "p = {p:g}"\nset key outside\n'
        + (f"plot {plots}\n" if plots else "")
    )
    (out / f"{stem}.gp").write_text(script)
