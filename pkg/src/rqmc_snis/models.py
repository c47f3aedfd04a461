"""Target densities and proposals for the two Bayesian test problems.

* Inverse problem: ``y = z + lambda F(z) + noise`` with ``F_i(z) = z_i exp(-z_i^2)``,
  ``y = 0``, noise precision ``n`` and prior ``N(1, I)``.
* Logistic regression on the Pima diabetes data with a ``N(0, I)`` prior,
  proposals centred at the Laplace fit.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import special

from .transport import TransportMap, gaussian_map, student_t_map

__all__ = [
    "PROPOSAL_KINDS",
    "FitError",
    "IngestionError",
    "InverseProblemSpec",
    "LogisticSpec",
    "ProposalSpec",
    "build_logistic_proposal",
    "build_proposal",
    "conjugate_reference",
    "inverse_problem_log_unnorm_target",
    "inverse_problem_psi",
    "laplace_fit",
    "load_pima",
    "logistic_grad",
    "logistic_log_likelihood",
    "logistic_log_posterior",
    "gaussian_log_prior",
]

PROPOSAL_KINDS = ("PriorIS", "ODIS", "LapIS", "tIS0", "tIS")
T_DOF = 5.0
PIMA_ROWS = 392
PIMA_PREDICTORS = 8


class FitError(RuntimeError):
    pass


class IngestionError(ValueError):
    pass


def gaussian_log_prior(z, mean):
    z = np.atleast_2d(z)
    diff = z - mean
    d = z.shape[1]
    return -0.5 * np.einsum("ij,ij->i", diff, diff) - 0.5 * d * math.log(2 * math.pi)


# ---------------------------------------------------------------------------
# Inverse problem
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InverseProblemSpec:
    d: int
    n: float = 20.0
    kappa: float = 1.0

    def __post_init__(self):
        if self.d < 1 or not self.n >= 0 or not self.kappa > 0:
            raise ValueError("need d >= 1, n >= 0 and kappa > 0")
        if self.kappa > 1:
            raise ValueError("kappa = (1 + lambda)^-2 with lambda >= 0 requires kappa <= 1")

    @property
    def lam(self) -> float:
        return self.kappa**-0.5 - 1.0

    @property
    def prior_mu(self) -> np.ndarray:
        return np.ones(self.d)

    @property
    def prior_sigma(self) -> np.ndarray:
        return np.eye(self.d)


def inverse_problem_psi(z, lam: float):
    """Misfit ``0.5 * sum z_i^2 (1 + lambda exp(-z_i^2))^2``, one value per row."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    g = z * (1.0 + lam * np.exp(-z * z))
    return 0.5 * np.einsum("ij,ij->i", g, g)


def inverse_problem_log_unnorm_target(z, spec: InverseProblemSpec):
    """``-n Psi(z) + log pi_0(z)``; scalar for a single point, vector for rows."""
    z = np.asarray(z, dtype=np.float64)
    out = -spec.n * inverse_problem_psi(z, spec.lam) + gaussian_log_prior(z, spec.prior_mu)
    return float(out[0]) if z.ndim == 1 else out


@dataclass(frozen=True)
class ProposalSpec:
    kind: str
    mu: np.ndarray
    sigma: np.ndarray
    nu: float | None = None

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if sigma.shape != (mu.size, mu.size) or not np.allclose(sigma, sigma.T):
            raise ValueError("sigma must be a symmetric matrix matching mu")
        np.linalg.cholesky(sigma)  # raises if not positive definite
        if (self.nu is not None) != (self.kind in ("tIS0", "tIS")):
            if self.kind != "custom":
                raise ValueError(f"{self.kind}: degrees of freedom given for the wrong proposal family")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    def transport(self) -> TransportMap:
        if self.nu is None:
            return gaussian_map(self.mu, self.sigma)
        return student_t_map(self.mu, self.sigma, self.nu)


def build_proposal(kind: str, spec: InverseProblemSpec) -> ProposalSpec:
    d = spec.d
    one, zero, eye = np.ones(d), np.zeros(d), np.eye(d)
    lap = (spec.kappa / spec.n) * eye if spec.n > 0 else eye
    table = {
        "PriorIS": (one, eye, None),
        "ODIS": (zero, eye, None),
        "LapIS": (zero, lap, None),
        "tIS0": (one, eye, T_DOF),
        "tIS": (zero, lap, T_DOF),
    }
    if kind not in table:
        raise ValueError(f"unknown proposal {kind!r}; expected one of {PROPOSAL_KINDS}")
    mu, sigma, nu = table[kind]
    return ProposalSpec(kind, mu, sigma, nu)


def conjugate_reference(spec: InverseProblemSpec) -> float:
    """Posterior mean of ``|z|^2`` in the linear case ``lambda = 0``.

    Prior ``N(1, I)`` times likelihood ``exp(-n |z|^2 / 2)`` gives
    ``N(1/(n+1), I/(n+1))``.
    """
    if abs(spec.lam) > 1e-12:
        raise ValueError("closed form needs lambda = 0 (kappa = 1)")
    a = 1.0 / (spec.n + 1.0)
    return spec.d * (a + a * a)


# ---------------------------------------------------------------------------
# Logistic regression
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LogisticSpec:
    X: np.ndarray
    Y: np.ndarray
    source: str = field(default="", compare=False)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        Y = np.asarray(self.Y, dtype=np.float64)
        if X.ndim != 2 or Y.shape != (X.shape[0],) or X.shape[0] < 1:
            raise ValueError("X must be m x d and Y of length m")
        if not np.all((Y == 0) | (Y == 1)):
            raise ValueError("Y entries must be 0 or 1")
        X.setflags(write=False)
        Y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)

    @property
    def m(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]


def _log1pexp(a):
    # log(1 + e^a) without overflow: a + log1p(e^-a) for a > 0
    return np.where(a > 0, a + np.log1p(np.exp(-np.abs(a))), np.log1p(np.exp(-np.abs(a))))


def logistic_log_likelihood(beta, spec: LogisticSpec):
    """``beta' X' Y - sum_i log(1 + exp(X_i beta))`` for one or many ``beta``."""
    beta = np.asarray(beta, dtype=np.float64)
    B = np.atleast_2d(beta)
    eta = B @ spec.X.T
    out = eta @ spec.Y - _log1pexp(eta).sum(axis=1)
    return float(out[0]) if beta.ndim == 1 else out


def logistic_grad(beta, spec: LogisticSpec) -> np.ndarray:
    p = special.expit(spec.X @ beta)
    return spec.X.T @ (spec.Y - p)


def logistic_log_posterior(beta, spec: LogisticSpec):
    beta = np.asarray(beta, dtype=np.float64)
    out = logistic_log_likelihood(np.atleast_2d(beta), spec) + gaussian_log_prior(beta, np.zeros(spec.d))
    return float(out[0]) if beta.ndim == 1 else out


def laplace_fit(spec: LogisticSpec, tol: float = 1e-10, max_iter: int = 100):
    """Posterior mode and Laplace covariance under the ``N(0, I)`` prior.

    Newton on ``g(b) = X'(Y - p(b)) - b`` with Hessian ``-(I + X'WX)``; a
    step is halved (up to 30 times) until the gradient norm decreases.
    Returns ``(mu_star, sigma_star)`` with ``sigma_star = (I + X'WX)^-1``.
    """
    X, d = spec.X, spec.d
    eye = np.eye(d)

    def grad_hess(b):
        p = special.expit(X @ b)
        g = X.T @ (spec.Y - p) - b
        H = eye + (X * (p * (1.0 - p))[:, None]).T @ X
        return g, H

    beta = np.zeros(d)
    g, H = grad_hess(beta)
    gnorm = np.linalg.norm(g)
    for _ in range(max_iter):
        if gnorm <= tol:
            break
        step = np.linalg.solve(H, g)
        t = 1.0
        for _ in range(31):
            cand = beta + t * step
            g_new, H_new = grad_hess(cand)
            if np.linalg.norm(g_new) < gnorm:
                break
            t *= 0.5
        beta, g, H = cand, g_new, H_new
        gnorm = np.linalg.norm(g)
    if not gnorm <= tol:
        raise FitError(f"Newton did not converge in {max_iter} iterations (|grad| = {gnorm:.3e})")
    sigma = np.linalg.inv(H)
    return beta, 0.5 * (sigma + sigma.T)


def build_logistic_proposal(kind: str, spec: LogisticSpec, fit=None) -> ProposalSpec:
    """``LapIS``: ``N(mu*, Sigma*)``; ``tIS``: ``mu* + L t_5`` with ``L L' = Sigma*``."""
    mu, sigma = fit if fit is not None else laplace_fit(spec)
    if kind == "LapIS":
        return ProposalSpec("LapIS", mu, sigma)
    if kind == "tIS":
        return ProposalSpec("tIS", mu, sigma, T_DOF)
    raise ValueError(f"logistic model supports LapIS and tIS, not {kind!r}")


def _default_pima():
    return resources.files("rqmc_snis").joinpath("data/pima.csv")


def load_pima(path: str | Path | None = None, standardize: bool = True) -> LogisticSpec:
    """Read the 392-row complete-case Pima table.

    Expected layout: a header, eight numeric predictors, then a 0/1 label.
    The design matrix is an intercept column followed by the predictors,
    standardized to zero mean and unit (population) variance.
    """
    src = _default_pima() if path is None else Path(path)
    with src.open() as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise IngestionError(f"{src}: empty file")
    body = rows[1:]
    if len(body) != PIMA_ROWS or any(len(r) != PIMA_PREDICTORS + 1 for r in body):
        cols = sorted({len(r) for r in body})
        raise IngestionError(
            f"{src}: expected ({PIMA_ROWS} rows, {PIMA_PREDICTORS} predictors + label), "
            f"got {len(body)} rows with column counts {cols}"
        )
    try:
        data = np.array([[float(c) for c in r] for r in body])
    except ValueError as exc:
        raise IngestionError(f"{src}: non-numeric entry ({exc})") from None
    Z, Y = data[:, :PIMA_PREDICTORS], data[:, PIMA_PREDICTORS]
    if standardize:
        Z = (Z - Z.mean(axis=0)) / Z.std(axis=0)
    X = np.column_stack([np.ones(len(Z)), Z])
    return LogisticSpec(X, Y, str(src))
