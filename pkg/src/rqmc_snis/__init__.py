"""RQMC self-normalized importance sampling with transport-map proposals."""

__version__ = "0.1.0"

from .estimators import EstimateResult, WeightedSample, ess, is_estimate, rqmc_integrate, snis_estimate, weighted_sample
from .pointset import PointSet, digital_shift, generate_iid, generate_sobol, scramble_owen, star_discrepancy
from .transport import TransportMap, gaussian_map, student_t_map

__all__ = [
    "EstimateResult",
    "PointSet",
    "TransportMap",
    "WeightedSample",
    "__version__",
    "digital_shift",
    "ess",
    "gaussian_map",
    "generate_iid",
    "generate_sobol",
    "is_estimate",
    "rqmc_integrate",
    "scramble_owen",
    "snis_estimate",
    "star_discrepancy",
    "student_t_map",
    "weighted_sample",
]
