"""Shape statistics and Student-t intervals for replicated RQMC estimates."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .harness import ExperimentConfig, Problem, build_problem, resolve_threads, run_cell
from .models import InverseProblemSpec, conjugate_reference
from .transport import student_t_inv_cdf

__all__ = [
    "CIResult",
    "CoverageConfig",
    "CoverageResult",
    "DegenerateSampleError",
    "coverage_experiment",
    "known_truth",
    "sample_skewness_kurtosis",
    "student_t_ci",
    "write_coverage_csv",
]

COVERAGE_COLUMNS = ["nominal", "empirical", "meta_reps", "R", "N", "model", "proposal"]


class DegenerateSampleError(ValueError):
    pass


@dataclass(frozen=True)
class CIResult:
    center: float
    half_width: float
    nominal: float
    covered: bool | None = None

    def __post_init__(self):
        if not self.half_width >= 0:
            raise ValueError("half_width must be nonnegative")

    @property
    def lower(self) -> float:
        return self.center - self.half_width

    @property
    def upper(self) -> float:
        return self.center + self.half_width


def sample_skewness_kurtosis(values) -> tuple[float, float]:
    """Plug-in skewness ``m3 / m2^1.5`` and (non-excess) kurtosis ``m4 / m2^2``."""
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 1 or x.size < 4:
        raise ValueError("need at least 4 values")
    c = x - x.mean()
    m2 = np.mean(c**2)
    if not m2 > 0:
        raise DegenerateSampleError("sample variance is zero")
    return float(np.mean(c**3) / m2**1.5), float(np.mean(c**4) / m2**2)


def student_t_ci(values, a: float, truth: float | None = None) -> CIResult:
    """Two-sided interval ``mean +/- t_{R-1}(1 - a) S / sqrt(R)``; ``S`` uses ``R - 1``."""
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 1 or x.size < 2:
        raise ValueError("need at least 2 values")
    if not 0 < a <= 0.5:
        raise ValueError("a must lie in (0, 1/2]")
    R = x.size
    center = float(np.sum(x) / R)
    s = float(np.sqrt(np.sum((x - center) ** 2) / (R - 1)))
    q = float(student_t_inv_cdf(1.0 - a, R - 1))
    hw = q * s / math.sqrt(R)
    covered = None if truth is None else bool(abs(truth - center) <= hw)
    return CIResult(center, hw, 1.0 - 2.0 * a, covered)


@dataclass
class CoverageConfig:
    """Coverage run description; the JSON config mirrors these fields.

    ``truth`` may be omitted for models with a closed form (the Gaussian toy
    and the inverse problem at ``kappa = 1``).
    """

    model: dict
    proposal: str
    N: int = 256
    R: int = 10
    a: float = 0.025
    meta_reps: int = 2000
    master_seed: int = 0
    randomization: str = "owen"
    truth: float | None = None

    def __post_init__(self):
        if self.R < 2 or self.meta_reps < 1 or self.N < 1:
            raise ValueError("need R >= 2, meta_reps >= 1 and N >= 1")
        if not 0 < self.a <= 0.5:
            raise ValueError("a must lie in (0, 1/2]")

    @classmethod
    def from_json(cls, path) -> "CoverageConfig":
        data = json.loads(Path(path).read_text())
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def experiment(self, master_seed: int) -> ExperimentConfig:
        return ExperimentConfig(
            model=self.model,
            proposals=[self.proposal],
            Ns=[self.N],
            ps=[2.0],
            R=self.R,
            master_seed=master_seed,
            randomization=self.randomization,
        )


@dataclass
class CoverageResult:
    nominal: float
    empirical: float
    meta_reps: int
    R: int
    N: int | None = None
    model: str = ""
    proposal: str = ""
    hits: int = 0
    intervals: list[CIResult] = field(default_factory=list, repr=False)


def known_truth(model: dict) -> float:
    kind = model.get("kind")
    if kind == "gaussian_toy":
        return float(model["d"])
    if kind == "inverse_problem":
        spec = InverseProblemSpec(int(model["d"]), float(model.get("n", 20.0)), float(model["kappa"]))
        return conjugate_reference(spec)
    raise ValueError(f"no closed-form truth for model kind {kind!r}; give 'truth' explicitly")


def meta_seed(master_seed: int, k: int) -> int:
    ss = np.random.SeedSequence([int(master_seed), 0xC0FE, int(k)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def coverage_experiment(
    cfg: CoverageConfig | Callable[[int], np.ndarray],
    truth: float,
    meta_reps: int | None = None,
    a: float | None = None,
    master_seed: int = 0,
    threads: int | None = None,
) -> CoverageResult:
    """Fraction of ``meta_reps`` Student-t intervals that contain ``truth``.

    ``cfg`` is either a :class:`CoverageConfig` or a callable mapping a seed
    to one vector of ``R`` replicate values.
    """
    if isinstance(cfg, CoverageConfig):
        meta_reps = cfg.meta_reps if meta_reps is None else meta_reps
        a = cfg.a if a is None else a
        master_seed = cfg.master_seed
        problem: Problem = build_problem(cfg.model, [cfg.proposal])

        def draw(seed):
            cell = run_cell(problem, cfg.experiment(seed), cfg.proposal, cfg.N)
            if cell.error:
                raise RuntimeError(cell.error)
            return cell.estimates

        label, proposal, N = problem.label, cfg.proposal, cfg.N
    else:
        if meta_reps is None or a is None:
            raise ValueError("meta_reps and a are required with a sampler callable")
        draw, label, proposal, N = cfg, "custom", "", None

    seeds = [meta_seed(master_seed, k) for k in range(meta_reps)]
    nthreads = resolve_threads(threads)

    def one(seed):
        values = draw(seed)
        return student_t_ci(values, a, truth), len(values)

    if nthreads > 1:
        with ThreadPoolExecutor(nthreads) as pool:
            out = list(pool.map(one, seeds))
    else:
        out = [one(s) for s in seeds]
    cis = [ci for ci, _ in out]
    sizes = {r for _, r in out}
    R = sizes.pop() if len(sizes) == 1 else None
    hits = sum(ci.covered for ci in cis)
    return CoverageResult(1.0 - 2.0 * a, hits / meta_reps, meta_reps, R, N, label, proposal, hits, cis)


def write_coverage_csv(result: CoverageResult, out_dir) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        path = out / "coverage.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(COVERAGE_COLUMNS)
            w.writerow(
                [
                    format(result.nominal, ".17g"),
                    format(result.empirical, ".17g"),
                    result.meta_reps,
                    "" if result.R is None else result.R,
                    "" if result.N is None else result.N,
                    result.model,
                    result.proposal,
                ]
            )
    except OSError as exc:
        raise OSError(f"cannot write coverage report to {out}: {exc}") from exc
    return path
