"""Transport maps from the unit cube to R^d and their growth bookkeeping.

A map is an ordered list of stages.  The first stage applies univariate
inverse CDFs coordinate-wise; later stages are lower-triangular affine maps
``y -> L y + mu`` or coordinate-wise activations.  Besides pushing points
forward, a map reports the constants that control how fast an integrand
composed with it can grow (``C_tau``, ``M_tau``) and the sub-Gaussian tail
parameters ``(alpha, eta)`` of its output, which feed the convergence-rate
predictor :func:`predict_beta`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from scipy import special

__all__ = [
    "EPS",
    "ACTIVATION_CONSTANTS",
    "Affine",
    "AnalysisError",
    "ComponentInverseCDF",
    "ComponentNonlinear",
    "GrowthProfile",
    "GrowthRate",
    "TailProfile",
    "TheoremInapplicable",
    "TransportMap",
    "compose_growth",
    "compose_growth_recursive",
    "gaussian_map",
    "map_forward",
    "nonlinear_eval",
    "normal_cdf",
    "normal_inv_cdf",
    "predict_beta",
    "student_t_cdf",
    "student_t_inv_cdf",
    "student_t_map",
    "tail_profile",
]

#: slack used for every "(1 + eps)" factor and "- eps" margin in the calculus
EPS = 1e-3


class AnalysisError(ValueError):
    """The growth or tail calculus does not cover this stage composition."""


class TheoremInapplicable(ValueError):
    """Rate prediction requested outside ``p * max(M, 0) < alpha``."""


def _check_open_unit(u):
    u = np.asarray(u, dtype=np.float64)
    if np.any(~(u > 0.0)) or np.any(~(u < 1.0)):
        raise ValueError("inverse CDF argument must lie strictly inside (0, 1)")
    return u


# ---------------------------------------------------------------------------
# Univariate distributions
# ---------------------------------------------------------------------------

# Acklam's rational approximation (relative error about 1.15e-9)
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def _acklam(u: np.ndarray) -> np.ndarray:
    x = np.empty_like(u)
    lo = u < _P_LOW
    hi = u > 1.0 - _P_LOW
    mid = ~(lo | hi)
    if np.any(mid):
        q = u[mid] - 0.5
        r = q * q
        num = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
        den = ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0
        x[mid] = num / den
    for mask, sign, tail in ((lo, 1.0, u), (hi, -1.0, 1.0 - u)):
        if np.any(mask):
            q = np.sqrt(-2.0 * np.log(tail[mask]))
            num = ((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]
            den = (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0
            x[mask] = sign * num / den
    return x


def normal_cdf(x):
    return special.ndtr(x)


def normal_inv_cdf(u):
    """Standard normal quantile.

    Rational first guess refined by one Halley step.  The residual is taken
    on whichever tail is smaller (``erfc`` form) so that accuracy holds near
    both 0 and 1.
    """
    u = _check_open_unit(u)
    scalar = u.ndim == 0
    u = np.atleast_1d(u)
    x = _acklam(u)
    upper = u > 0.5
    # residual e = Phi(x) - u, computed without cancellation in the upper tail
    e = np.where(
        upper,
        (1.0 - u) - 0.5 * special.erfc(x / math.sqrt(2.0)),
        0.5 * special.erfc(-x / math.sqrt(2.0)) - u,
    )
    t = e * math.sqrt(2.0 * math.pi) * np.exp(0.5 * x * x)
    x = x - t / (1.0 + 0.5 * x * t)
    return x[0] if scalar else x


def _normal_logpdf(y):
    return -0.5 * y * y - 0.5 * math.log(2.0 * math.pi)


def student_t_cdf(x, nu):
    return special.stdtr(nu, x)


def _inc_beta_inverse(target, a, b, iters=100):
    """Solve ``I_x(a, b) = target`` for ``log x``.

    Newton on ``log I`` as a function of ``log x`` (nearly linear in the
    tail, since ``I_x ~ x**a / (a B(a, b))``), falling back to bisection
    whenever a step leaves the current bracket.
    """
    target = np.asarray(target, dtype=np.float64)
    log_target = np.log(target)
    log_beta = special.betaln(a, b)
    # leading-order tail inversion as the starting point
    z = np.minimum((log_target + math.log(a) + log_beta) / a, math.log(0.5))
    lo = np.full_like(target, -740.0)
    hi = np.zeros_like(target)
    active = np.arange(target.size)
    for _ in range(iters):
        za, lt = z[active], log_target[active]
        x = np.exp(za)
        ix = special.betainc(a, b, x)
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            g = np.log(ix) - lt
            log_dens = (a - 1) * za + (b - 1) * np.log1p(-x) - log_beta
            slope = np.exp(za + log_dens) / ix
            z_new = za - g / slope
        lo[active] = np.where(g < 0, za, lo[active])
        hi[active] = np.where(g > 0, za, hi[active])
        la, ha = lo[active], hi[active]
        bad = ~np.isfinite(z_new) | (z_new <= la) | (z_new >= ha)
        z_new = np.where(bad, 0.5 * (la + ha), z_new)
        z[active] = z_new
        keep = (np.abs(z_new - za) > 1e-15 * np.maximum(1.0, np.abs(za))) & (g != 0)
        active = active[keep]
        if active.size == 0:
            break
    return z


def student_t_inv_cdf(u, nu: float):
    """Quantile of Student's t with ``nu`` degrees of freedom.

    With ``x = nu / (nu + t**2)`` the lower tail satisfies
    ``2 u = I_x(nu/2, 1/2)``.  Where ``t**2 < nu`` the complementary
    variable ``1 - x`` is the small one, and ``1 - 2u = I_{1-x}(1/2, nu/2)``
    is solved instead so that no precision is lost near the median.
    """
    if not nu > 0:
        raise ValueError("degrees of freedom must be positive")
    u = _check_open_unit(u)
    scalar = u.ndim == 0
    u = np.atleast_1d(u)
    p = np.minimum(u, 1.0 - u)
    sign = np.where(u < 0.5, -1.0, 1.0)
    t = np.zeros_like(u)
    z0 = normal_inv_cdf(p)
    tail = (z0 * z0 > nu) | (p < 0.25 * min(nu, 1.0))
    centre = ~tail & (p < 0.5)
    if np.any(tail):
        log_x = _inc_beta_inverse(2.0 * p[tail], 0.5 * nu, 0.5)
        t[tail] = np.exp(0.5 * (math.log(nu) + np.log1p(-np.exp(log_x)) - log_x))
    if np.any(centre):
        log_y = _inc_beta_inverse(1.0 - 2.0 * p[centre], 0.5, 0.5 * nu)
        t[centre] = np.exp(0.5 * (math.log(nu) + log_y - np.log1p(-np.exp(log_y))))
    t = sign * t
    return t[0] if scalar else t


def _t_logpdf(y, nu):
    return (
        special.gammaln(0.5 * (nu + 1.0))
        - special.gammaln(0.5 * nu)
        - 0.5 * math.log(nu * math.pi)
        - 0.5 * (nu + 1.0) * np.log1p(y * y / nu)
    )


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

#: (C_T, M_T) for each activation: |T(y)| <= C_T |y| + C and derivatives
#: bounded by exp(M_T y^2)
ACTIVATION_CONSTANTS = {
    "sigmoid": (0.0, 0.0),
    "softplus": (0.0, 0.0),
    "tanh": (1.0, 0.0),
    "swish": (1.0, 0.0),
}


def nonlinear_eval(kind: str, y):
    y = np.asarray(y, dtype=np.float64)
    if kind == "sigmoid":
        return special.expit(y)
    if kind == "softplus":
        return np.logaddexp(0.0, y)
    if kind == "tanh":
        return np.tanh(y)
    if kind == "swish":
        return y * special.expit(y)
    raise ValueError(f"unknown activation {kind!r}")


def _nonlinear_logderiv(kind, y):
    # swish is not monotone, so it has no change-of-variables density
    if kind == "sigmoid":
        return -np.logaddexp(0.0, y) - np.logaddexp(0.0, -y)
    if kind == "softplus":
        return -np.logaddexp(0.0, -y)
    if kind == "tanh":
        return math.log(4.0) - 2.0 * np.logaddexp(y, -y)
    raise AnalysisError(f"activation {kind!r} is not invertible; no density available")


# ---------------------------------------------------------------------------
# Stages and maps
# ---------------------------------------------------------------------------


def _parse_dist(spec):
    if spec in ("normal", "gaussian"):
        return ("normal", None)
    if isinstance(spec, (tuple, list)) and spec[0] in ("t", "student_t"):
        nu = float(spec[1])
        if not nu > 0:
            raise ValueError("degrees of freedom must be positive")
        return ("t", nu)
    raise ValueError(f"unsupported distribution {spec!r}")


@dataclass(frozen=True)
class ComponentInverseCDF:
    """Coordinate-wise inverse CDFs; entries are ``"normal"`` or ``("t", nu)``."""

    dists: tuple

    def __post_init__(self):
        object.__setattr__(self, "dists", tuple(_parse_dist(s) for s in self.dists))

    @property
    def dim(self):
        return len(self.dists)

    def _groups(self):
        groups = {}
        for j, dist in enumerate(self.dists):
            groups.setdefault(dist, []).append(j)
        return groups

    def forward(self, u):
        y = np.empty_like(u)
        for (name, nu), cols in self._groups().items():
            y[:, cols] = normal_inv_cdf(u[:, cols]) if name == "normal" else student_t_inv_cdf(u[:, cols], nu)
        return y

    def logpdf(self, y):
        out = np.zeros(y.shape[0])
        for (name, nu), cols in self._groups().items():
            block = y[:, cols]
            out += (_normal_logpdf(block) if name == "normal" else _t_logpdf(block, nu)).sum(axis=1)
        return out

    def to_json(self):
        return {
            "type": "inverse_cdf",
            "dists": [name if nu is None else [name, nu] for name, nu in self.dists],
        }


@dataclass(frozen=True)
class Affine:
    """``y -> L y + mu`` with ``L`` lower triangular and a positive diagonal."""

    L: np.ndarray
    mu: np.ndarray

    def __post_init__(self):
        L = np.array(self.L, dtype=np.float64)
        mu = np.array(self.mu, dtype=np.float64)
        if L.ndim != 2 or L.shape[0] != L.shape[1] or mu.shape != (L.shape[0],):
            raise ValueError("Affine needs a square L and a matching mu")
        if np.any(np.triu(L, 1) != 0):
            raise ValueError("L must be lower triangular")
        if np.any(np.diag(L) <= 0):
            raise ValueError("L must have a strictly positive diagonal")
        L.setflags(write=False)
        mu.setflags(write=False)
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "mu", mu)

    @classmethod
    def from_covariance(cls, sigma, mu):
        return cls(np.linalg.cholesky(np.asarray(sigma, dtype=np.float64)), mu)

    @property
    def dim(self):
        return self.L.shape[0]

    @property
    def M_L(self) -> float:
        return float(np.linalg.eigvalsh(self.L.T @ self.L).max())

    def forward(self, y):
        return y @ self.L.T + self.mu

    def log_abs_det(self):
        return float(np.log(np.diag(self.L)).sum())

    def to_json(self):
        return {"type": "affine", "L": self.L.tolist(), "mu": self.mu.tolist()}


@dataclass(frozen=True)
class ComponentNonlinear:
    kinds: tuple

    def __post_init__(self):
        kinds = tuple(self.kinds)
        for k in kinds:
            if k not in ACTIVATION_CONSTANTS:
                raise ValueError(f"unknown activation {k!r}")
        object.__setattr__(self, "kinds", kinds)

    @property
    def dim(self):
        return len(self.kinds)

    @property
    def constants(self):
        """Largest ``(C_T, M_T)`` over the coordinates."""
        cs = [ACTIVATION_CONSTANTS[k] for k in self.kinds]
        return max(c for c, _ in cs), max(m for _, m in cs)

    def forward(self, y):
        out = np.empty_like(y)
        for j, k in enumerate(self.kinds):
            out[:, j] = nonlinear_eval(k, y[:, j])
        return out

    def log_abs_det(self, y):
        return sum(_nonlinear_logderiv(k, y[:, j]) for j, k in enumerate(self.kinds))

    def to_json(self):
        return {"type": "nonlinear", "kinds": list(self.kinds)}


Stage = Union[ComponentInverseCDF, Affine, ComponentNonlinear]


@dataclass(frozen=True)
class GrowthRate:
    """Growth exponent ``M`` in ``|D^a f(x)| <~ exp(M |x|^2)``.

    ``arbitrarily_small_positive`` marks a rate that holds for every
    positive epsilon on top of ``value`` (e.g. polynomial growth has
    ``value=0`` with the flag set).
    """

    value: float
    arbitrarily_small_positive: bool = False

    def __add__(self, other):
        if not isinstance(other, GrowthRate):
            other = GrowthRate(float(other))
        return GrowthRate(
            self.value + other.value,
            self.arbitrarily_small_positive or other.arbitrarily_small_positive,
        )

    __radd__ = __add__

    @property
    def effectively_nonpositive(self) -> bool:
        """True when ``max(M, 0)`` can be taken as 0 (or as small as wanted)."""
        return self.value <= 0


@dataclass(frozen=True)
class GrowthProfile:
    """Constants of a map ``tau``: ``|tau(x)| <= C_tau |x| + C`` and
    ``|D^a tau_i(x)| <~ exp(M_tau |x|^2)``, plus the output tail parameters
    (``alpha=None`` for heavy tails, ``alpha=inf`` for bounded output)."""

    C_tau: float
    M_tau: float
    alpha: float | None = None
    eta: float | None = None

    def __post_init__(self):
        if self.C_tau < 0:
            raise ValueError("C_tau must be non-negative")
        if self.alpha is not None and not self.alpha > 0:
            raise ValueError("alpha must be positive")


@dataclass(frozen=True)
class TailProfile:
    alpha: float | None
    eta: float | None
    heavy_tailed: bool = False
    #: growth of 1/q is only "arbitrarily small" for heavy-tailed bases
    M_q: GrowthRate | None = None


@dataclass(frozen=True)
class TransportMap:
    stages: tuple = field(default_factory=tuple)

    def __post_init__(self):
        stages = tuple(self.stages)
        if not stages or not isinstance(stages[0], ComponentInverseCDF):
            raise ValueError("the first stage must be a ComponentInverseCDF")
        for st in stages[1:]:
            if isinstance(st, ComponentInverseCDF):
                raise ValueError("only the first stage may be an inverse CDF")
            if st.dim != stages[0].dim:
                raise ValueError("all stages must share one dimension")
        object.__setattr__(self, "stages", stages)

    @property
    def dim(self) -> int:
        return self.stages[0].dim

    def forward(self, u):
        return map_forward(self, u)

    def forward_with_logdensity(self, u):
        """Push ``u`` forward and return ``(x, log q(x))`` by change of variables."""
        u = _check_open_unit(np.atleast_2d(u))
        y = self.stages[0].forward(u)
        logq = self.stages[0].logpdf(y)
        for st in self.stages[1:]:
            if isinstance(st, Affine):
                logq = logq - st.log_abs_det()
            else:
                logq = logq - st.log_abs_det(y)
            y = st.forward(y)
        return y, logq

    def logpdf(self, x):
        """Density of the pushforward at arbitrary ``x`` (affine-only maps)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        y = x
        logdet = 0.0
        for st in reversed(self.stages[1:]):
            if not isinstance(st, Affine):
                raise AnalysisError("logpdf at arbitrary points supports affine stages only")
            y = np.linalg.solve(st.L, (y - st.mu).T).T
            logdet += st.log_abs_det()
        return self.stages[0].logpdf(y) - logdet

    def layers(self):
        """``(C_T, M_T, M_L)`` per layer ``T(L x + mu)`` after the inverse CDF.

        An affine stage with no activation after it has the identity
        activation ``(1, 0)``; an activation with no affine before it uses
        ``L = I``.
        """
        out = []
        pending = None
        for st in self.stages[1:]:
            if isinstance(st, Affine):
                if pending is not None:
                    out.append((1.0, 0.0, pending))
                pending = st.M_L
            else:
                c, m = st.constants
                out.append((c, m, 1.0 if pending is None else pending))
                pending = None
        if pending is not None:
            out.append((1.0, 0.0, pending))
        return out

    @property
    def growth(self) -> GrowthProfile:
        layers = self.layers()
        if layers:
            C_T = max(c for c, _, _ in layers)
            M_T = max(m for _, m, _ in layers)
            M_L = max(ml for _, _, ml in layers)
            prof = compose_growth_recursive([(C_T, M_T, M_L)] * len(layers), self.dim)
        else:
            prof = GrowthProfile(1.0, 0.0)
        try:
            tail = tail_profile(self)
        except AnalysisError:
            return prof
        return GrowthProfile(prof.C_tau, prof.M_tau, tail.alpha, tail.eta)

    def to_json(self) -> str:
        return json.dumps({"stages": [st.to_json() for st in self.stages]})

    @classmethod
    def from_json(cls, text: str) -> "TransportMap":
        stages = []
        for st in json.loads(text)["stages"]:
            kind = st["type"]
            if kind == "inverse_cdf":
                stages.append(ComponentInverseCDF(tuple(tuple(d) if isinstance(d, list) else d for d in st["dists"])))
            elif kind == "affine":
                stages.append(Affine(np.array(st["L"]), np.array(st["mu"])))
            elif kind == "nonlinear":
                stages.append(ComponentNonlinear(tuple(st["kinds"])))
            else:
                raise ValueError(f"unknown stage type {kind!r}")
        return cls(tuple(stages))


def gaussian_map(mu, sigma) -> TransportMap:
    """``u -> mu + L Phi^{-1}(u)`` with ``L L^T = sigma``."""
    mu = np.asarray(mu, dtype=np.float64)
    return TransportMap((ComponentInverseCDF(("normal",) * mu.size), Affine.from_covariance(sigma, mu)))


def student_t_map(mu, sigma, nu: float) -> TransportMap:
    """``u -> mu + L F_t^{-1}(u)``: a linear map of IID t coordinates."""
    mu = np.asarray(mu, dtype=np.float64)
    return TransportMap((ComponentInverseCDF((("t", nu),) * mu.size), Affine.from_covariance(sigma, mu)))


def map_forward(T: TransportMap, u) -> np.ndarray:
    """Apply the stages of ``T`` to the rows of ``u`` (or to a single point)."""
    u = _check_open_unit(u)
    single = u.ndim == 1
    y = np.atleast_2d(u)
    if y.shape[1] != T.dim:
        raise ValueError(f"expected points of dimension {T.dim}, got {y.shape[1]}")
    for st in T.stages:
        y = st.forward(y)
    return y[0] if single else y


# ---------------------------------------------------------------------------
# Growth calculus
# ---------------------------------------------------------------------------


def compose_growth(M_f: GrowthRate, prof: GrowthProfile, d: int, eps: float = EPS) -> GrowthRate:
    """Growth rate of ``f o tau``: ``M_f C_tau^2 (1 + eps) + d M_tau``."""
    value = M_f.value * prof.C_tau**2 * (1.0 + eps) + d * prof.M_tau
    flag = M_f.arbitrarily_small_positive and math.isfinite(prof.C_tau) and prof.M_tau == 0
    return GrowthRate(value, flag)


def compose_growth_recursive(stages: Sequence[tuple[float, float, float]], d: int, eps: float = EPS) -> GrowthProfile:
    """Constants for ``tau^K o ... o tau^1`` with ``tau^k(x) = T^k(L^k x + mu^k)``.

    ``stages`` holds ``(C_T, M_T, M_L)`` per layer; the layers must share
    ``(C_T, M_T)``, and ``M_L`` is taken as the maximum over layers.
    """
    stages = list(stages)
    if not stages:
        return GrowthProfile(1.0, 0.0)
    C_T, M_T = stages[0][0], stages[0][1]
    if any((c, m) != (C_T, M_T) for c, m, _ in stages):
        raise AnalysisError("all layers must share the activation constants (C_T, M_T)")
    M_L = max(ml for _, _, ml in stages)
    growth_unit = C_T * math.sqrt(M_L)
    M_tau = 0.0
    for k in range(1, len(stages) + 1):
        C_star = growth_unit ** (2 * (k - 1)) * ((1.0 + eps) if k > 1 else 1.0)
        M_tau = M_T * M_L * (1.0 + eps) * C_star + d * M_tau
    return GrowthProfile(growth_unit ** len(stages), M_tau)


def tail_profile(T: TransportMap, eps: float = EPS) -> TailProfile:
    """Sub-Gaussian tail parameters of ``T(U)`` for uniform ``U``.

    Gaussian base: ``|T(u)| <= C_tau |z| + C`` with ``z`` standard normal, so
    ``alpha = 1 / (2 C_tau^2) - eps`` and ``eta = d - 2``.  For a single
    affine layer this is ``lambda_min(Sigma^{-1}) / 2 - eps``, divided by
    ``C_T^2`` when a bounded-slope activation follows.  A Student-t base has
    polynomial tails: no ``alpha``, and ``1/q`` grows arbitrarily slowly.
    """
    dists = {name for name, _ in T.stages[0].dists}
    if dists == {"t"}:
        return TailProfile(None, None, heavy_tailed=True, M_q=GrowthRate(0.0, True))
    if dists != {"normal"}:
        raise AnalysisError("tail analysis needs an all-Gaussian or all-t base")
    layers = T.layers()
    if layers:
        C_T = max(c for c, _, _ in layers)
        M_L = max(ml for _, _, ml in layers)
        C_tau = (C_T * math.sqrt(M_L)) ** len(layers)
    else:
        C_tau = 1.0
    alpha = math.inf if C_tau == 0 else 1.0 / (2.0 * C_tau**2) - eps
    if not alpha > 0:
        raise AnalysisError("eps slack exceeds the tail constant")
    return TailProfile(alpha, T.dim - 2.0)


def predict_beta(M: GrowthRate, alpha: float | None, p: float) -> float:
    """Predicted exponent ``beta = 1 - p max(M, 0) / alpha`` of the L_p error.

    ``alpha=None`` stands for a heavy-tailed proposal, for which only the
    ``M <= 0`` branch is available.
    """
    if p < 1:
        raise ValueError("p must be at least 1")
    if M.effectively_nonpositive:
        return 1.0
    if alpha is None:
        raise TheoremInapplicable("heavy-tailed transport: rate known only for non-positive growth")
    if not p * M.value < alpha:
        raise TheoremInapplicable(f"p*M = {p * M.value:g} is not below alpha = {alpha:g}")
    return 1.0 - p * M.value / alpha
