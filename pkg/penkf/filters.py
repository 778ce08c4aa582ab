"""
Stochastic EnKF, taper-localized EnKF and penalized EnKF sharing one forecast/analysis cycle.
"""
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg, sparse
from scipy.sparse import linalg as splinalg

from penkf.config import settings
from penkf.core import (
    ArrayLike,
    DiagonalCovariance,
    DimensionMismatchError,
    Ensemble,
    PenkfError,
    RngStream,
    StateVector,
    SymmetricMatrix,
    sample_covariance,
    sample_mean,
)
from penkf.dynamics import DynamicsModel, IntegrationError
from penkf.glasso import PenaltyMatrix, PrecisionEstimate, penalized_forecast_cov
from penkf.logger import get_logger

logger = get_logger(__name__)


class FilterDivergenceError(PenkfError):
    """
    Raised when an ensemble member stops being finite.
    """

    def __init__(self, message: str, member: Optional[int] = None):
        super().__init__(message)
        self.member = member


class AnalysisError(PenkfError):
    """
    Raised when the analysis linear system cannot be factorized.
    """

    pass


class GainVariant(str, Enum):
    SAMPLE = "sample"
    TAPERED = "tapered"
    PENALIZED = "penalized"


class ObservationOperator:
    """
    Sparse linear observation operator H (r×p) with diagonal noise covariance R.
    """

    def __init__(self, h_matrix: Union[sparse.spmatrix, ArrayLike], noise: DiagonalCovariance):
        h_matrix = sparse.csr_matrix(h_matrix, dtype=float)
        if h_matrix.ndim != 2:
            raise DimensionMismatchError("observation operator must be a matrix")
        if np.any(h_matrix.getnnz(axis=1) == 0):
            raise ValueError("every observation must depend on at least one state variable")
        if noise.dimension != h_matrix.shape[0]:
            raise DimensionMismatchError(f"{h_matrix.shape[0]} observations but {noise.dimension} noise variances")
        self.h_matrix = h_matrix
        self.noise = noise

    @classmethod
    def from_indices(cls, p: int, indices: Sequence[int], variance: float) -> "ObservationOperator":
        """
        Direct observation of the listed (0-based) state variables.
        """
        indices = np.asarray(indices, dtype=int)
        if indices.size == 0 or np.any(indices < 0) or np.any(indices >= p):
            raise ValueError(f"observed indices must lie in [0, {p})")
        h_matrix = sparse.csr_matrix((np.ones(indices.size), (np.arange(indices.size), indices)), shape=(indices.size, p))
        return cls(h_matrix, DiagonalCovariance.isotropic(indices.size, variance))

    @classmethod
    def every_other(cls, p: int, variance: float, offset: int = 0, stride: int = 2) -> "ObservationOperator":
        """
        Observes variables offset, offset + stride, ... ; the defaults observe the odd variables in
        1-based numbering (H has ones at (i, 2i − 1)).
        """
        return cls.from_indices(p, np.arange(offset, p, stride), variance)

    @property
    def r(self) -> int:
        return self.h_matrix.shape[0]

    @property
    def p(self) -> int:
        return self.h_matrix.shape[1]

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.h_matrix @ x)

    def precision_term(self) -> sparse.csr_matrix:
        """
        HᵀR⁻¹H as a sparse p×p matrix.
        """
        inverse_noise = sparse.diags(1.0 / self.noise.variances)
        return sparse.csr_matrix(self.h_matrix.T @ inverse_noise @ self.h_matrix)


def gaspari_cohn(z: ArrayLike) -> np.ndarray:
    """
    Gaspari-Cohn fifth-order piecewise rational correlation function of z = d/c, supported on [0, 2).
    """
    z = np.abs(np.asarray(z, dtype=float))
    values = np.zeros_like(z)
    inner = z <= 1.0
    outer = (z > 1.0) & (z < 2.0)
    zi = z[inner]
    values[inner] = -(zi ** 5) / 4.0 + zi ** 4 / 2.0 + 5.0 * zi ** 3 / 8.0 - 5.0 * zi ** 2 / 3.0 + 1.0
    zo = z[outer]
    values[outer] = zo ** 5 / 12.0 - zo ** 4 / 2.0 + 5.0 * zo ** 3 / 8.0 + 5.0 * zo ** 2 / 3.0 - 5.0 * zo + 4.0 - 2.0 / (3.0 * zo)
    # the outer branch rounds to ~1e-16 of either sign near z = 2
    return np.clip(values, 0.0, 1.0)


class TaperMatrix:
    """
    Symmetric localization matrix with unit diagonal and entries G(d_ij / c) in [0, 1].
    """

    __slots__ = ("entries", "half_length", "cyclic")

    def __init__(self, entries: np.ndarray, half_length: float, cyclic: bool):
        self.entries = entries
        self.entries.flags.writeable = False
        self.half_length = half_length
        self.cyclic = cyclic

    @property
    def p(self) -> int:
        return self.entries.shape[0]


def build_taper(p: int, c: float, cyclic: bool = True) -> TaperMatrix:
    if c <= 0:
        raise ValueError(f"taper half-length must be positive, got {c}")
    index = np.arange(p)
    distance = np.abs(index[:, None] - index[None, :])
    if cyclic:
        distance = np.minimum(distance, p - distance)
    return TaperMatrix(gaspari_cohn(distance / c), float(c), cyclic)


@dataclass
class KalmanGain:
    matrix: np.ndarray
    variant: GainVariant

    def __post_init__(self):
        if not np.all(np.isfinite(self.matrix)):
            raise FilterDivergenceError(f"{self.variant.value} gain has non-finite entries")


@dataclass
class FilterState:
    ensemble: Ensemble
    cycle_index: int = 0
    last_gain: Optional[KalmanGain] = None
    last_precision: Optional[PrecisionEstimate] = None


def _check_observation(obs: ObservationOperator, p: int) -> None:
    if obs.p != p:
        raise DimensionMismatchError(f"observation operator acts on {obs.p} states, got {p}")


def sample_gain(Pf: Union[SymmetricMatrix, ArrayLike], obs: ObservationOperator, variant=GainVariant.SAMPLE) -> KalmanGain:
    """
    K = Pᶠ Hᵀ (H Pᶠ Hᵀ + R)⁻¹.
    """
    Pf = np.asarray(Pf, dtype=float)
    _check_observation(obs, Pf.shape[0])
    pht = np.asarray(obs.h_matrix @ Pf).T
    innovation_cov = np.asarray(obs.h_matrix @ pht) + obs.noise.dense()
    innovation_cov = 0.5 * (innovation_cov + innovation_cov.T)
    try:
        gain = linalg.solve(innovation_cov, pht.T, assume_a="pos").T
    except linalg.LinAlgError as e:
        raise AnalysisError(f"innovation covariance is not positive definite: {e}")
    return KalmanGain(gain, variant)


def precision_gain(
    theta: Union[sparse.spmatrix, ArrayLike], obs: ObservationOperator, variant: GainVariant = GainVariant.SAMPLE
) -> KalmanGain:
    """
    K = ((Pᶠ)⁻¹ + HᵀR⁻¹H)⁻¹ HᵀR⁻¹ from the forecast precision (Pᶠ)⁻¹.
    """
    theta = theta.toarray() if sparse.issparse(theta) else np.asarray(theta, dtype=float)
    _check_observation(obs, theta.shape[0])
    system = theta + obs.precision_term().toarray()
    ht_rinv = (obs.h_matrix.T @ sparse.diags(1.0 / obs.noise.variances)).toarray()
    try:
        gain = linalg.solve(0.5 * (system + system.T), ht_rinv, assume_a="pos")
    except linalg.LinAlgError as e:
        raise AnalysisError(f"precision-form system is not positive definite: {e}")
    return KalmanGain(gain, variant)


def tapered_gain(S: Union[SymmetricMatrix, ArrayLike], taper: TaperMatrix, obs: ObservationOperator) -> KalmanGain:
    S = np.asarray(S, dtype=float)
    if taper.p != S.shape[0]:
        raise DimensionMismatchError(f"taper is {taper.p}×{taper.p}, covariance {S.shape}")
    return sample_gain(taper.entries * S, obs, variant=GainVariant.TAPERED)


def penalized_gain(prec: PrecisionEstimate, obs: ObservationOperator) -> KalmanGain:
    """
    K̃ built from the penalized forecast covariance W = P̂ᶠ + Λ∘Z̃.
    """
    return sample_gain(prec.w, obs, variant=GainVariant.PENALIZED)


def forecast_step(
    state: FilterState, model: DynamicsModel, q_noise: Optional[DiagonalCovariance], rng: RngStream
) -> FilterState:
    """
    a^j ← f(a^j) + w^j with w^j ~ N(0, Q); `q_noise=None` adds nothing and draws nothing.
    """
    members = state.ensemble.members
    if model.dimension != members.shape[0]:
        raise DimensionMismatchError(f"model has dimension {model.dimension}, ensemble {members.shape[0]}")
    try:
        evolved = model.evolve(members)
    except IntegrationError:
        evolved = None
    if evolved is None or not np.all(np.isfinite(evolved)):
        member = _first_bad_member(model, members)
        raise FilterDivergenceError(f"ensemble member {member} became non-finite during the forecast", member=member)
    if q_noise is not None:
        evolved = evolved + q_noise.std[:, None] * rng.standard_normal(evolved.shape)
    return FilterState(Ensemble(evolved), state.cycle_index, state.last_gain, state.last_precision)


def _first_bad_member(model: DynamicsModel, members: np.ndarray) -> Optional[int]:
    for j in range(members.shape[1]):
        try:
            if not np.all(np.isfinite(model.evolve(members[:, j]))):
                return j
        except IntegrationError:
            return j
    return None


def perturb_observations(y: ArrayLike, obs: ObservationOperator, n: int, rng: RngStream) -> np.ndarray:
    """
    r×n matrix D whose column j is y + η^j, η^j ~ N(0, R).
    """
    y = np.asarray(y, dtype=float)
    if y.shape != (obs.r,):
        raise DimensionMismatchError(f"expected {obs.r} observations, got shape {y.shape}")
    return y[:, None] + obs.noise.std[:, None] * rng.standard_normal((obs.r, n))


def _innovations(A0: Ensemble, D: np.ndarray, obs: ObservationOperator) -> np.ndarray:
    _check_observation(obs, A0.p)
    D = np.asarray(D, dtype=float)
    if D.shape != (obs.r, A0.n):
        raise DimensionMismatchError(f"perturbed observations have shape {D.shape}, expected {(obs.r, A0.n)}")
    return D - obs.apply(A0.members)


def analysis_update(A0: Ensemble, D: np.ndarray, obs: ObservationOperator, gain: KalmanGain) -> Ensemble:
    """
    A = A₀ + K (D − H A₀).
    """
    innovations = _innovations(A0, D, obs)
    if gain.matrix.shape != (A0.p, obs.r):
        raise DimensionMismatchError(f"gain has shape {gain.matrix.shape}, expected {(A0.p, obs.r)}")
    return Ensemble(A0.members + gain.matrix @ innovations)


def penkf_analysis(A0: Ensemble, D: np.ndarray, obs: ObservationOperator, prec: PrecisionEstimate) -> Ensemble:
    """
    A = A₀ + U with (Θ + HᵀR⁻¹H) U = HᵀR⁻¹ (D − H A₀).

    Up to `DENSE_SOLVE_MAX_P` variables the system is solved by dense Cholesky; larger systems use a
    sparse factorization with a symmetric minimum-degree ordering.
    """
    innovations = _innovations(A0, D, obs)
    if prec.p != A0.p:
        raise DimensionMismatchError(f"precision is {prec.p}×{prec.p}, ensemble has p={A0.p}")
    system = sparse.csc_matrix(prec.theta + obs.precision_term())
    rhs = np.asarray(obs.h_matrix.T @ (innovations / obs.noise.variances[:, None]))
    try:
        if A0.p <= settings.DENSE_SOLVE_MAX_P:
            dense = system.toarray()
            update = linalg.cho_solve(linalg.cho_factor(0.5 * (dense + dense.T), lower=True), rhs)
        else:
            # diag_pivot_thresh=0 keeps the symmetric ordering, as for a Cholesky factorization
            factor = splinalg.splu(system, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0)
            update = factor.solve(rhs)
    except (linalg.LinAlgError, RuntimeError) as e:
        raise AnalysisError(f"could not factorize the analysis system: {e}")
    return Ensemble(A0.members + update)


class AssimilationMethod(ABC):
    """
    Forecast covariance estimator plus analysis, one per filter family.
    """

    name: str = ""

    @abstractmethod
    def analyse(self, forecast: Ensemble, D: np.ndarray, obs: ObservationOperator, state: FilterState) -> FilterState:
        pass


class StochasticEnKF(AssimilationMethod):
    name = "enkf"

    def analyse(self, forecast, D, obs, state):
        gain = sample_gain(sample_covariance(forecast), obs)
        return FilterState(analysis_update(forecast, D, obs, gain), state.cycle_index, gain, None)


class TaperedEnKF(AssimilationMethod):
    name = "taper"

    def __init__(self, half_length: float = 10.0, cyclic: bool = True):
        self.half_length = half_length
        self.cyclic = cyclic
        self._taper: Optional[TaperMatrix] = None

    def taper(self, p: int) -> TaperMatrix:
        if self._taper is None or self._taper.p != p:
            self._taper = build_taper(p, self.half_length, self.cyclic)
        return self._taper

    def analyse(self, forecast, D, obs, state):
        gain = tapered_gain(sample_covariance(forecast), self.taper(forecast.p), obs)
        return FilterState(analysis_update(forecast, D, obs, gain), state.cycle_index, gain, None)


class PenalizedEnKF(AssimilationMethod):
    """
    Re-estimates the sparse forecast precision every cycle and analyses through sparse solves.

    With `warm_start` the previous cycle's solution seeds the solver; the minimizer, and therefore
    the analysis, is unchanged up to the solver tolerance. `keep_gain` also forms the dense K̃.
    """

    name = "penkf"

    def __init__(
        self,
        penalty: PenaltyMatrix,
        tol: Optional[float] = None,
        max_sweeps: Optional[int] = None,
        warm_start: bool = False,
        keep_gain: bool = False,
    ):
        self.penalty = penalty
        self.tol = tol
        self.max_sweeps = max_sweeps
        self.warm_start = warm_start
        self.keep_gain = keep_gain

    def analyse(self, forecast, D, obs, state):
        previous = state.last_precision if self.warm_start else None
        prec = penalized_forecast_cov(forecast, self.penalty, self.tol, self.max_sweeps, warm_start=previous)
        gain = penalized_gain(prec, obs) if self.keep_gain else None
        return FilterState(penkf_analysis(forecast, D, obs, prec), state.cycle_index, gain, prec)


def run_cycle(
    state: FilterState,
    model: DynamicsModel,
    obs: ObservationOperator,
    y_t: ArrayLike,
    method: AssimilationMethod,
    rng: RngStream,
) -> Tuple[FilterState, StateVector]:
    """
    One assimilation cycle: forecast, covariance estimate, perturbed observations, analysis, mean.

    The forecast noise is drawn before the observation perturbations, from the same stream.
    """
    forecast = forecast_step(state, model, model.process_noise, rng)
    D = perturb_observations(y_t, obs, forecast.ensemble.n, rng)
    analysed = method.analyse(forecast.ensemble, D, obs, forecast)
    analysed.cycle_index = state.cycle_index + 1
    return analysed, sample_mean(analysed.ensemble)
