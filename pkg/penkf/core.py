"""
Domain types and elementary numerics shared by every filter.

Matrices are dense numpy arrays here; sparsity only appears in `penkf.glasso.PrecisionEstimate`.
States are stored column-wise: an ensemble is a p×n array whose column j is member j.
"""
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

ArrayLike = Union[np.ndarray, Sequence[float]]


class PenkfError(Exception):
    """
    Base class for every error raised by penkf.
    """

    pass


class InsufficientMembersError(PenkfError):
    """
    Raised when an ensemble has too few members for the requested statistic.
    """

    pass


class DimensionMismatchError(PenkfError):
    """
    Raised when two operands disagree on a dimension.
    """

    pass


class NonFiniteStateError(PenkfError):
    """
    Raised when a state vector or ensemble contains NaN or Inf.
    """

    pass


class InvalidParameterError(PenkfError, ValueError):
    """
    Raised when a covariance or penalty parameter is outside its admissible range.
    """

    pass


def _as_finite_array(values: ArrayLike, ndim: int, what: str) -> np.ndarray:
    array = np.array(values, dtype=float)
    if array.ndim != ndim:
        raise DimensionMismatchError(f"{what} must be {ndim}-dimensional, got shape {array.shape}")
    if not np.all(np.isfinite(array)):
        raise NonFiniteStateError(f"{what} contains non-finite entries")
    return array


class StateVector:
    """
    Real state vector of length p with finite entries.
    """

    __slots__ = ("values",)

    def __init__(self, values: ArrayLike):
        self.values = _as_finite_array(values, 1, "state vector")
        self.values.flags.writeable = False

    @property
    def p(self) -> int:
        return self.values.shape[0]

    def __len__(self) -> int:
        return self.p

    def __array__(self, dtype=None):
        return self.values if dtype is None else self.values.astype(dtype)

    def __repr__(self) -> str:
        return f"StateVector(p={self.p})"


class Ensemble:
    """
    p×n collection of state vectors, column j holding member j.

    The members array is the only mutable core object: the owning filter loop may replace it after
    each cycle, always through `Ensemble.replace` so the finiteness invariant is re-checked.
    """

    __slots__ = ("members",)

    def __init__(self, members: ArrayLike):
        self.members = _as_finite_array(members, 2, "ensemble")
        if self.n < 2:
            raise InsufficientMembersError(f"an ensemble needs at least 2 members, got {self.n}")

    @property
    def p(self) -> int:
        return self.members.shape[0]

    @property
    def n(self) -> int:
        return self.members.shape[1]

    def replace(self, members: ArrayLike) -> None:
        members = _as_finite_array(members, 2, "ensemble")
        if members.shape != self.members.shape:
            raise DimensionMismatchError(f"expected shape {self.members.shape}, got {members.shape}")
        self.members = members

    def copy(self) -> "Ensemble":
        return Ensemble(self.members.copy())

    def anomalies(self) -> np.ndarray:
        return self.members - self.members.mean(axis=1, keepdims=True)

    def spread(self) -> float:
        """
        Square root of the mean ensemble variance over coordinates.
        """
        return float(np.sqrt(np.mean(np.var(self.members, axis=1, ddof=1))))

    def __repr__(self) -> str:
        return f"Ensemble(p={self.p}, n={self.n})"


class SymmetricMatrix:
    """
    p×p real matrix, symmetric by construction (the input is averaged with its transpose).
    """

    __slots__ = ("entries",)

    def __init__(self, entries: ArrayLike):
        array = np.array(entries, dtype=float)
        if array.ndim != 2 or array.shape[0] != array.shape[1]:
            raise DimensionMismatchError(f"symmetric matrix must be square, got shape {array.shape}")
        self.entries = 0.5 * (array + array.T)
        self.entries.flags.writeable = False

    @property
    def p(self) -> int:
        return self.entries.shape[0]

    def __array__(self, dtype=None):
        return self.entries if dtype is None else self.entries.astype(dtype)

    def __repr__(self) -> str:
        return f"SymmetricMatrix(p={self.p})"


class DiagonalCovariance:
    """
    Diagonal covariance given by its strictly positive variances.

    Zero noise is never expressed as zero variances: callers pass `None` where a noise covariance is
    optional.
    """

    __slots__ = ("variances",)

    def __init__(self, variances: ArrayLike):
        variances = _as_finite_array(variances, 1, "variances")
        if variances.size == 0:
            raise DimensionMismatchError("variances must not be empty")
        if np.any(variances <= 0):
            raise InvalidParameterError("all variances must be strictly positive")
        variances.flags.writeable = False
        self.variances = variances

    @classmethod
    def isotropic(cls, dimension: int, variance: float) -> "DiagonalCovariance":
        return cls(np.full(dimension, float(variance)))

    @property
    def dimension(self) -> int:
        return self.variances.shape[0]

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variances)

    def dense(self) -> np.ndarray:
        return np.diag(self.variances)

    def __repr__(self) -> str:
        return f"DiagonalCovariance(dimension={self.dimension})"


@dataclass
class RngStream:
    """
    Reproducible random stream.

    Draws come from numpy's PCG64 bit generator; normal variates use numpy's ziggurat method
    (`Generator.standard_normal`). Identical seed and keys with an identical call sequence give
    bit-identical draws on every platform numpy supports.
    """

    seed: int
    keys: tuple = ()
    algorithm: str = field(default="PCG64", init=False)
    generator: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.seed = int(self.seed)
        self.keys = tuple(int(k) for k in self.keys)
        sequence = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, *self.keys])
        self.generator = np.random.Generator(np.random.PCG64(sequence))

    def derive(self, *keys: int) -> "RngStream":
        """
        Independent child stream, identified by the parent's keys followed by `keys`.
        """
        return RngStream(self.seed, self.keys + tuple(keys))

    def standard_normal(self, size) -> np.ndarray:
        return self.generator.standard_normal(size)

    def choice(self, population: int, size: int) -> np.ndarray:
        return self.generator.choice(population, size=size, replace=False)


def sample_mean(ens: Ensemble) -> StateVector:
    if ens.n < 1:
        raise InsufficientMembersError("cannot average an empty ensemble")
    return StateVector(ens.members.mean(axis=1))


def sample_covariance(ens: Ensemble) -> SymmetricMatrix:
    """
    Unbiased sample covariance (1/(n−1)) Σ_j (a^j − ā)(a^j − ā)ᵀ.
    """
    if ens.n < 2:
        raise InsufficientMembersError(f"insufficient members: sample covariance needs n >= 2, got {ens.n}")
    anomalies = ens.anomalies()
    return SymmetricMatrix(anomalies @ anomalies.T / (ens.n - 1))


def rmse(estimate: Union[StateVector, ArrayLike], truth: Union[StateVector, ArrayLike]) -> float:
    estimate = np.asarray(estimate, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if estimate.shape != truth.shape:
        raise DimensionMismatchError(f"length mismatch: {estimate.shape} vs {truth.shape}")
    if truth.size == 0:
        raise DimensionMismatchError("rmse of empty vectors")
    return float(np.sqrt(np.sum((estimate - truth) ** 2) / truth.shape[0]))


def draw_gaussian(
    mean: Union[StateVector, ArrayLike], cov: Optional[DiagonalCovariance], count: int, rng: RngStream
) -> Ensemble:
    """
    Draw `count` independent columns mean + √cov·z with z standard normal.

    `cov=None` is the explicit zero-noise path: every column equals the mean and no draws are
    consumed from `rng`.
    """
    if count < 2:
        raise InsufficientMembersError(f"count must be >= 2, got {count}")
    mean = np.asarray(mean, dtype=float)
    columns = np.repeat(mean[:, None], count, axis=1)
    if cov is None:
        return Ensemble(columns)
    if cov.dimension != mean.shape[0]:
        raise DimensionMismatchError(f"mean has length {mean.shape[0]}, covariance {cov.dimension}")
    return Ensemble(columns + cov.std[:, None] * rng.standard_normal((mean.shape[0], count)))
