"""Uniform point sets on the open unit cube.

Deterministic Sobol' points (Gray-code order, Joe-Kuo direction numbers),
their randomizations (nested uniform scrambling and digital shifts), IID
uniforms, and exact star discrepancy for small instances.

All generators work on 32-bit integer digits and convert to floats at the
end; every coordinate is clamped to ``[2**-32, 1 - 2**-32]`` so that inverse
CDFs downstream never see 0 or 1.
"""

from __future__ import annotations

import csv
import functools
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

__all__ = [
    "BITS",
    "CapacityError",
    "DirectionNumberTable",
    "PointSet",
    "PRNG_ALGORITHM",
    "digital_shift",
    "generate_iid",
    "generate_sobol",
    "load_direction_numbers",
    "make_rng",
    "scramble_owen",
    "star_discrepancy",
]

BITS = 32
_SCALE = 2.0**-BITS
U_MIN = _SCALE
U_MAX = 1.0 - _SCALE

PRNG_ALGORITHM = "Philox4x64-10 (numpy.random.Philox, keyed by SeedSequence)"

GENERATORS = ("iid", "sobol", "sobol_owen", "sobol_digital_shift")


class CapacityError(ValueError):
    """Request exceeds what a table or an exact algorithm can handle."""


def make_rng(*key: int) -> np.random.Generator:
    """Counter-based generator for the stream identified by ``key``.

    Distinct keys give statistically independent streams, so replicate ``r``
    of a run seeded with ``s`` can use ``make_rng(s, r)`` without coordination.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


@dataclass(frozen=True)
class PointSet:
    """An ``count x dim`` array of points in the open unit cube.

    ``digits`` keeps the 32-bit integer representation for generators that
    have one (Sobol' and its randomizations); it is ``None`` for IID points.
    """

    points: np.ndarray
    generator: str
    seed: int | None = None
    digits: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ValueError(f"unknown generator {self.generator!r}")
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2:
            raise ValueError("points must be a 2-D array")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.digits is not None:
            self.digits.setflags(write=False)

    @property
    def count(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def meta(self) -> dict:
        return {
            "generator": self.generator,
            "seed": self.seed,
            "dim": self.dim,
            "count": self.count,
        }

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            for row in self.points:
                writer.writerow([format(v, ".17g") for v in row])


# ---------------------------------------------------------------------------
# Direction numbers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DirectionNumberTable:
    """Primitive polynomials and initial direction integers per dimension.

    Records are ``(d, s, a, m)`` for dimensions ``d >= 2``; dimension 1 is the
    van der Corput sequence and has no record.
    """

    records: tuple[tuple[int, int, int, tuple[int, ...]], ...]

    def __post_init__(self):
        for k, (d, s, a, m) in enumerate(self.records):
            if d != k + 2:
                raise ValueError(f"direction-number records must be consecutive from d=2 (got d={d})")
            if len(m) != s:
                raise ValueError(f"dimension {d}: expected {s} initial direction numbers, got {len(m)}")
            for j, mj in enumerate(m, start=1):
                if mj % 2 == 0 or not 0 < mj < 2**j:
                    raise ValueError(f"dimension {d}: m_{j}={mj} must be odd and below 2^{j}")

    @property
    def max_dim(self) -> int:
        return len(self.records) + 1

    def direction_integers(self, dim: int) -> np.ndarray:
        """``(dim, BITS)`` array ``V[j, k] = v_{j,k+1} * 2**BITS`` as uint64."""
        if dim > self.max_dim:
            raise CapacityError(
                f"dimension {dim} exceeds the direction-number table capacity ({self.max_dim}); "
                "supply a larger Joe-Kuo file"
            )
        V = np.zeros((dim, BITS), dtype=np.uint64)
        V[0] = [1 << (BITS - 1 - k) for k in range(BITS)]
        for j in range(1, dim):
            _, s, a, m = self.records[j - 1]
            v = [0] * BITS
            for k in range(min(s, BITS)):
                v[k] = m[k] << (BITS - 1 - k)
            for k in range(s, BITS):
                x = v[k - s] ^ (v[k - s] >> s)
                for i in range(1, s):
                    if (a >> (s - 1 - i)) & 1:
                        x ^= v[k - i]
                v[k] = x
            V[j] = v
        return V


def load_direction_numbers(path: str | Path | None = None) -> DirectionNumberTable:
    """Parse a file in the Joe-Kuo ``d s a m_1 ... m_s`` layout.

    Without ``path`` the bundled 64-dimensional table is used.  A header line
    (anything whose first token is not an integer) is skipped.
    """
    if path is None:
        text = resources.files("rqmc_snis").joinpath("data/new-joe-kuo-6.64").read_text()
    else:
        text = Path(path).read_text()
    records = []
    for line in text.splitlines():
        tok = line.split()
        if not tok or not tok[0].isdigit():
            continue
        d, s, a = int(tok[0]), int(tok[1]), int(tok[2])
        records.append((d, s, a, tuple(int(t) for t in tok[3 : 3 + s])))
    return DirectionNumberTable(tuple(records))


@functools.lru_cache(maxsize=4)
def _default_table() -> DirectionNumberTable:
    return load_direction_numbers()


@functools.lru_cache(maxsize=64)
def _sobol_digits(dim: int, n: int, table: DirectionNumberTable | None) -> np.ndarray:
    table = table or _default_table()
    V = table.direction_integers(dim)
    if n > 2**BITS:
        raise CapacityError(f"at most 2^{BITS} Sobol' points are available")
    idx = np.arange(n, dtype=np.uint64)
    gray = idx ^ (idx >> np.uint64(1))
    X = np.zeros((n, dim), dtype=np.uint64)
    for k in range(max(int(n - 1).bit_length(), 0)):
        bit = ((gray >> np.uint64(k)) & np.uint64(1)).astype(bool)
        X[bit] ^= V[:, k]
    X.setflags(write=False)
    return X


def _to_unit(digits: np.ndarray) -> np.ndarray:
    return np.clip(digits.astype(np.float64) * _SCALE, U_MIN, U_MAX)


def generate_sobol(dim: int, n: int, table: DirectionNumberTable | None = None) -> PointSet:
    """First ``n`` points of the ``dim``-dimensional Sobol' sequence.

    Point ``i`` is the XOR of the direction integers selected by the bits of
    the Gray code of ``i``, i.e. the classical Gray-code ordering.  The
    origin (index 0) comes out as ``2**-32`` in every coordinate after the
    open-cube clamp.
    """
    if dim < 1 or n < 1:
        raise ValueError("dim and n must be positive")
    digits = _sobol_digits(int(dim), int(n), table)
    return PointSet(_to_unit(digits), "sobol", None, digits)


def _require_sobol(base: PointSet) -> np.ndarray:
    if base.generator != "sobol" or base.digits is None:
        raise ValueError("randomization expects an unrandomized Sobol' point set")
    return base.digits


_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _mix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer; a bijection on uint64 with full avalanche."""
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def scramble_owen(base: PointSet, seed: int) -> PointSet:
    """Nested uniform (Owen) scrambling of a Sobol' point set to 32 bits.

    The permutation at every node of the binary tree is a bit flip drawn
    lazily from a keyed hash of the node's path (coordinate, depth and the
    preceding digits), so no permutation tree is ever stored.
    """
    digits = _require_sobol(base)
    n, dim = digits.shape
    keys = make_rng(seed, 0x0E7A).integers(0, 2**63, size=dim, dtype=np.uint64, endpoint=False)
    keys = _mix64(keys * _GOLDEN + np.uint64(1))
    out = digits.copy()
    one = np.uint64(1)
    with np.errstate(over="ignore"):
        for k in range(BITS):
            shift = np.uint64(BITS - k)
            # node id: leading 1 marks the depth, then the k digits above
            node = (digits >> shift) | (one << np.uint64(k))
            h = _mix64(node * _GOLDEN ^ keys)
            flip = (h >> np.uint64(63)) << np.uint64(BITS - 1 - k)
            out ^= flip
    return PointSet(_to_unit(out), "sobol_owen", int(seed), out)


def digital_shift(base: PointSet, seed: int | None = None, shift: np.ndarray | None = None) -> PointSet:
    """XOR one uniform 32-bit shift per coordinate into every point.

    ``shift`` (integers in ``[0, 2**32)``) overrides the seeded draw; it is
    mainly useful for tests.
    """
    digits = _require_sobol(base)
    if shift is None:
        if seed is None:
            raise ValueError("either seed or shift is required")
        shift = make_rng(seed, 0xD5).integers(0, 2**BITS, size=digits.shape[1], dtype=np.uint64)
    shift = np.asarray(shift, dtype=np.uint64)
    out = digits ^ shift
    return PointSet(_to_unit(out), "sobol_digital_shift", None if seed is None else int(seed), out)


def generate_iid(dim: int, n: int, seed: int) -> PointSet:
    if dim < 1 or n < 1:
        raise ValueError("dim and n must be positive")
    u = make_rng(seed, 0x11D).random((n, dim))
    return PointSet(np.clip(u, U_MIN, U_MAX), "iid", int(seed))


# ---------------------------------------------------------------------------
# Star discrepancy
# ---------------------------------------------------------------------------

MAX_GRID_CELLS = 2**25


def star_discrepancy(ps: PointSet | np.ndarray) -> float:
    """Exact star discrepancy by enumerating the critical grid.

    The grid along axis ``j`` is the set of distinct point coordinates plus
    1.  At each node ``z`` both the closed count ``#{u <= z}`` and the open
    count ``#{u < z}`` are compared with the box volume; the supremum over
    anchored boxes is attained at one of these one-sided limits.  Counts come
    from a d-dimensional histogram on the rank grid followed by cumulative
    sums, so the cost is ``O(prod_j |grid_j|)``.
    """
    pts = ps.points if isinstance(ps, PointSet) else np.atleast_2d(np.asarray(ps, dtype=np.float64))
    n, d = pts.shape
    grids, ranks = [], []
    for j in range(d):
        g = np.unique(np.append(pts[:, j], 1.0))
        grids.append(g)
        ranks.append(np.searchsorted(g, pts[:, j]))
    shape = tuple(len(g) for g in grids)
    if np.prod(shape, dtype=float) > MAX_GRID_CELLS:
        raise CapacityError(
            f"exact star discrepancy needs {np.prod(shape, dtype=float):.3g} grid cells "
            f"(limit {MAX_GRID_CELLS}); reduce N or d"
        )
    hist = np.zeros(shape, dtype=np.int64)
    np.add.at(hist, tuple(ranks), 1)
    closed = hist
    for j in range(d):
        closed = np.cumsum(closed, axis=j)
    opened = np.pad(closed, [(1, 0)] * d)[tuple(slice(0, s) for s in shape)]
    vol = functools.reduce(np.multiply.outer, grids) if d > 1 else grids[0]
    return float(max(np.max(closed / n - vol), np.max(vol - opened / n)))
