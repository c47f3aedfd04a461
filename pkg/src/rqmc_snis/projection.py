"""Smoothed radial projection used as a verification fixture.

``psi`` is the CDF of a symmetric Beta(d+1, d+1) law, evaluated exactly from
the binomial expansion of ``s^d (1-s)^d``.  ``project`` is the identity
inside radius ``(1-delta) r``, zero outside ``r``, and shrinks ``x`` by
``1 - psi`` in between.
"""

from __future__ import annotations

import csv
import functools
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

__all__ = ["ProjectionParams", "psi", "psi_derivative", "project", "psi_coefficients", "psi_polynomial", "dump_profiles"]


@dataclass(frozen=True)
class ProjectionParams:
    r: float
    delta: float
    d: int

    def __post_init__(self):
        if not self.r > 0:
            raise ValueError("radius must be positive")
        if not 0 < self.delta < 0.5:
            raise ValueError("delta must lie in (0, 1/2)")
        if self.d < 1:
            raise ValueError("d must be a positive integer")
        if not (1 - self.delta) * self.r > 1:
            raise ValueError("need (1 - delta) * r > 1")


@functools.lru_cache(maxsize=None)
def psi_coefficients(d: int) -> tuple[Fraction, ...]:
    """Exact coefficients ``c_k`` of ``psi(t) = sum_k c_k t^k``.

    ``s^d (1-s)^d = sum_i C(d,i) (-1)^i s^(d+i)`` integrates term by term to
    powers ``t^(d+i+1)``; the normaliser is ``(2d+1)! / (d!)^2``.
    """
    norm = Fraction(math.factorial(2 * d + 1), math.factorial(d) ** 2)
    coeffs = [Fraction(0)] * (2 * d + 2)
    for i in range(d + 1):
        coeffs[d + i + 1] = norm * math.comb(d, i) * (-1) ** i / (d + i + 1)
    return tuple(coeffs)


def _horner(coeffs, t):
    out = np.zeros_like(t)
    for c in reversed(coeffs):
        out = out * t + c
    return out


def psi_polynomial(t: Fraction, d: int) -> Fraction:
    """Exact value of the polynomial that equals ``psi`` on [0, 1].

    Defined for any rational ``t`` so that centred difference stencils can
    straddle the endpoints without rounding error.
    """
    out = Fraction(0)
    for c in reversed(psi_coefficients(d)):
        out = out * t + c
    return out


def psi(t, d: int):
    t = np.asarray(t, dtype=np.float64)
    if np.any((t < 0) | (t > 1)) or np.any(np.isnan(t)):
        raise ValueError("psi is defined on [0, 1]")
    coeffs = [float(c) for c in psi_coefficients(d)]
    # the expansion cancels badly near 1; use psi(t) = 1 - psi(1 - t) there
    upper = t > 0.5
    return np.where(upper, 1.0 - _horner(coeffs, np.where(upper, 1.0 - t, 0.0)), _horner(coeffs, np.where(upper, 0.0, t)))


def psi_derivative(t, d: int, k: int):
    """Exact ``k``-th derivative of ``psi`` (closed-form polynomial)."""
    coeffs = list(psi_coefficients(d))
    for _ in range(k):
        coeffs = [c * j for j, c in enumerate(coeffs)][1:] or [Fraction(0)]
    return _horner([float(c) for c in coeffs], np.asarray(t, dtype=np.float64))


def project(x, params: ProjectionParams) -> np.ndarray:
    """Radial projection of one point (1-D input) or of each row."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    inner = (1.0 - params.delta) * params.r
    norm = np.linalg.norm(X, axis=1)
    t = np.clip((norm - inner) / (params.delta * params.r), 0.0, 1.0)
    scale = np.where(norm <= inner, 1.0, np.where(norm >= params.r, 0.0, 1.0 - psi(t, params.d)))
    out = X * scale[:, None]
    return out[0] if single else out


def dump_profiles(path, params: ProjectionParams, num: int = 201) -> None:
    """CSV of ``t, psi(t)`` and the radial scale ``|P_r(x)| / |x|`` against ``|x|``."""
    t = np.linspace(0.0, 1.0, num)
    radius = np.linspace(0.0, 1.2 * params.r, num)
    e1 = np.zeros(params.d)
    e1[0] = 1.0
    proj = project(radius[:, None] * e1, params)[:, 0]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "psi", "radius", "projected_radius"])
        for row in zip(t, psi(t, params.d), radius, proj):
            w.writerow([format(v, ".17g") for v in row])
