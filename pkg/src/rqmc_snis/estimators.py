"""Plain RQMC, importance sampling and self-normalized importance sampling.

Weights are carried as log-weights and exponentiated only after subtracting
their maximum.  Sums go through ``np.sum`` on contiguous arrays, which uses
pairwise summation, so results for a fixed sample do not depend on how the
sample was produced.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .pointset import PointSet
from .transport import TransportMap

__all__ = [
    "DegenerateWeightsError",
    "EstimateResult",
    "EvaluationError",
    "WeightedSample",
    "ess",
    "is_estimate",
    "rqmc_integrate",
    "snis_estimate",
    "squared_norm",
    "weighted_sample",
]


class EvaluationError(ArithmeticError):
    """A non-finite value appeared while evaluating an integrand or density."""


class DegenerateWeightsError(EvaluationError):
    """Every weight vanished (or the weights cannot be normalised)."""


def squared_norm(x: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->i", x, x)


def _first_bad(values, what):
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        i = int(bad[0])
        raise EvaluationError(f"non-finite {what} at point index {i}: {values[i]!r}")


@dataclass(frozen=True)
class WeightedSample:
    x: np.ndarray
    logw: np.ndarray
    fvals: np.ndarray

    def __post_init__(self):
        logw = np.ascontiguousarray(self.logw, dtype=np.float64)
        fvals = np.ascontiguousarray(self.fvals, dtype=np.float64)
        if logw.ndim != 1 or logw.size < 1 or fvals.shape != logw.shape:
            raise ValueError("logw and fvals must be equal-length non-empty vectors")
        _first_bad(logw, "log-weight")
        _first_bad(fvals, "integrand value")
        object.__setattr__(self, "logw", logw)
        object.__setattr__(self, "fvals", fvals)

    @property
    def n(self) -> int:
        return self.logw.size


@dataclass(frozen=True)
class EstimateResult:
    value: float
    ess: float
    n: int


def weighted_sample(
    log_target: Callable[[np.ndarray], np.ndarray],
    proposal: TransportMap,
    ps: PointSet,
    f: Callable[[np.ndarray], np.ndarray] = squared_norm,
) -> WeightedSample:
    """Draw ``x_i = T(u_i)`` and attach ``log pi_bar(x_i) - log q(x_i)`` and ``f(x_i)``."""
    if ps.dim != proposal.dim:
        raise ValueError(f"point set has dimension {ps.dim}, map expects {proposal.dim}")
    x, logq = proposal.forward_with_logdensity(ps.points)
    logp = np.asarray(log_target(x), dtype=np.float64)
    _first_bad(logp, "target log-density")
    _first_bad(logq, "proposal log-density")
    return WeightedSample(x, logp - logq, np.asarray(f(x), dtype=np.float64))


def rqmc_integrate(f: Callable[[np.ndarray], np.ndarray], T: TransportMap, ps: PointSet) -> float:
    """``(1/N) sum_i f(T(u_i))``; ``f`` receives the whole ``N x d`` array."""
    if ps.dim != T.dim:
        raise ValueError(f"point set has dimension {ps.dim}, map expects {T.dim}")
    vals = np.ascontiguousarray(f(T.forward(ps.points)), dtype=np.float64)
    _first_bad(vals, "integrand value")
    return float(np.sum(vals) / vals.size)


def _stabilized(logw):
    m = np.max(logw)
    if m == -np.inf:
        raise DegenerateWeightsError("all weights are zero")
    w = np.exp(logw - m)
    total = np.sum(w)
    if not total > 0:
        raise DegenerateWeightsError("all weights underflow to zero")
    return w, total, m


def is_estimate(ws: WeightedSample) -> float:
    """``(1/N) sum_i w_i f_i`` with the caller's normalisation kept in ``logw``."""
    w, _, m = _stabilized(ws.logw)
    inner = np.sum(w * ws.fvals) / ws.n
    with np.errstate(over="ignore"):
        value = float(np.exp(m) * inner)
    if not np.isfinite(value):
        raise EvaluationError(f"IS estimate overflows (max log-weight {m:.6g})")
    return value


def ess(logw) -> float:
    """Effective sample size ``(sum w)^2 / sum w^2``."""
    logw = np.ascontiguousarray(logw, dtype=np.float64)
    # -inf encodes a zero weight; NaN and +inf are errors
    _first_bad(np.where(logw == -np.inf, 0.0, logw), "log-weight")
    w, total, _ = _stabilized(logw)
    return float(total * total / np.sum(w * w))


def snis_estimate(ws: WeightedSample) -> EstimateResult:
    """Self-normalized estimate ``sum w_i f_i / sum w_i`` with its ESS."""
    w, total, _ = _stabilized(ws.logw)
    value = float(np.sum(w * ws.fvals) / total)
    # a convex combination cannot leave [min f, max f]; guard against rounding
    value = min(max(value, float(np.min(ws.fvals))), float(np.max(ws.fvals)))
    return EstimateResult(value, float(total * total / np.sum(w * w)), ws.n)
