"""
Dynamics models for twin experiments.

Every model advances states by one assimilation interval. `evolve` accepts either a single state
(shape (p,)) or an ensemble array (shape (p, n)); columns are advanced independently and give the
same bits as advancing them one at a time.
"""
from abc import ABC, abstractmethod
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, validator

from penkf.core import ArrayLike, DiagonalCovariance, DimensionMismatchError, PenkfError, StateVector
from penkf.logger import get_logger

logger = get_logger(__name__)

Derivative = Callable[[np.ndarray], np.ndarray]


class IntegrationError(PenkfError):
    """
    Raised when a Runge-Kutta step produces non-finite values.
    """

    pass


class ModelDivergenceError(PenkfError):
    """
    Raised when a free model run leaves the finite numbers.
    """

    pass


class DynamicsModel(ABC):
    """
    Deterministic map advancing a p-dimensional state by one assimilation interval.

    `process_noise` is `None` for noiseless dynamics; filters and truth simulation add
    N(0, process_noise) after `evolve` otherwise.
    """

    def __init__(self, dimension: int, process_noise: Optional[DiagonalCovariance] = None):
        if process_noise is not None and process_noise.dimension != dimension:
            raise DimensionMismatchError(f"process noise has dimension {process_noise.dimension}, model {dimension}")
        self.dimension = dimension
        self.process_noise = process_noise

    @abstractmethod
    def evolve(self, x: np.ndarray) -> np.ndarray:
        pass

    @property
    @abstractmethod
    def descriptor(self) -> Dict:
        pass

    def _check_dimension(self, x: np.ndarray) -> None:
        if x.shape[0] != self.dimension:
            raise DimensionMismatchError(f"model has dimension {self.dimension}, state has {x.shape[0]}")


def lorenz96_derivative(x: ArrayLike, forcing: float = 8.0) -> np.ndarray:
    """
    dx_i/dt = (x_{i+1} − x_{i−2}) x_{i−1} − x_i + F with cyclic indices, along axis 0.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[0] < 4:
        raise DimensionMismatchError(f"Lorenz-96 needs at least 4 variables, got {x.shape[0]}")
    return (np.roll(x, -1, axis=0) - np.roll(x, 2, axis=0)) * np.roll(x, 1, axis=0) - x + forcing


def rk4_step(x: ArrayLike, dt: float, deriv: Derivative) -> np.ndarray:
    """
    Classical fourth-order Runge-Kutta step x + dt/6·(k₁ + 2k₂ + 2k₃ + k₄).
    """
    if dt <= 0:
        raise ValueError(f"step size must be positive, got {dt}")
    x = np.asarray(x, dtype=float)
    k1 = deriv(x)
    k2 = deriv(x + 0.5 * dt * k1)
    k3 = deriv(x + 0.5 * dt * k2)
    k4 = deriv(x + dt * k3)
    stepped = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(stepped)):
        raise IntegrationError("Runge-Kutta step produced non-finite values")
    return stepped


class Lorenz96Config(BaseModel):
    p: int = 40
    forcing: float = 8.0
    rk4_dt: float = 0.01
    steps_per_cycle: int = 40

    @validator("p")
    def p_at_least_four(cls, v):
        assert v >= 4, "Lorenz-96 needs p >= 4 so that i-2, i-1, i and i+1 are distinct"
        return v

    @validator("rk4_dt")
    def dt_positive(cls, v):
        assert v > 0, "rk4_dt must be positive"
        return v

    @validator("steps_per_cycle")
    def steps_positive(cls, v):
        assert v >= 1, "steps_per_cycle must be >= 1"
        return v


class Lorenz96Model(DynamicsModel):
    def __init__(self, cfg: Lorenz96Config):
        super().__init__(cfg.p)
        self.cfg = cfg

    def _derivative(self, x: np.ndarray) -> np.ndarray:
        return lorenz96_derivative(x, self.cfg.forcing)

    def evolve(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        self._check_dimension(x)
        for _ in range(self.cfg.steps_per_cycle):
            x = rk4_step(x, self.cfg.rk4_dt, self._derivative)
        return x

    @property
    def descriptor(self) -> Dict:
        return {"name": "lorenz96", **self.cfg.dict()}


def lorenz96_model(cfg: Lorenz96Config) -> DynamicsModel:
    return Lorenz96Model(cfg)


class LinearModel(DynamicsModel):
    """
    x ← F x (+ N(0, Q) noise added by the caller when `process_noise` is set).
    """

    def __init__(self, transition: ArrayLike, process_noise: Optional[DiagonalCovariance] = None):
        transition = np.array(transition, dtype=float)
        if transition.ndim != 2 or transition.shape[0] != transition.shape[1]:
            raise DimensionMismatchError(f"transition must be square, got shape {transition.shape}")
        super().__init__(transition.shape[0], process_noise)
        self.transition = transition
        radius = float(np.max(np.abs(np.linalg.eigvals(transition))))
        if radius > 1.0 + 1e-12:
            logger.warning(f"transition matrix has spectral radius {radius:.3f} > 1, states will grow")

    def evolve(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        self._check_dimension(x)
        return self.transition @ x

    @property
    def descriptor(self) -> Dict:
        return {"name": "linear", "p": self.dimension, "noisy": self.process_noise is not None}


def identity_model(p: int) -> DynamicsModel:
    return LinearModel(np.eye(p))


class LinearGaussianConfig:
    """
    Linear-Gaussian state-space model x_t = F x_{t−1} + w_t, y_t = H x_t + ε_t with x_0 ~ N(m_0, P_0).
    """

    def __init__(
        self,
        transition: ArrayLike,
        process_noise: Optional[DiagonalCovariance],
        observation,  # penkf.filters.ObservationOperator, untyped to avoid the import cycle
        initial_mean: ArrayLike,
        initial_covariance: ArrayLike,
    ):
        self.model = LinearModel(transition, process_noise)
        self.observation = observation
        self.initial_mean = np.array(initial_mean, dtype=float)
        self.initial_covariance = np.array(initial_covariance, dtype=float)
        p = self.model.dimension
        if self.initial_mean.shape != (p,) or self.initial_covariance.shape != (p, p):
            raise DimensionMismatchError("initial mean/covariance do not match the transition dimension")
        if observation.p != p:
            raise DimensionMismatchError(f"observation operator acts on {observation.p} states, model has {p}")

    @property
    def transition(self) -> np.ndarray:
        return self.model.transition

    @property
    def process_noise(self) -> Optional[DiagonalCovariance]:
        return self.model.process_noise


def exact_kalman_filter(
    cfg: LinearGaussianConfig, observations: Sequence[ArrayLike]
) -> List[Tuple[np.ndarray, np.ndarray]]:
    """
    Kalman filter recursion; returns the analysis (mean, covariance) after each observation.
    """
    H = cfg.observation.h_matrix.toarray()
    R = cfg.observation.noise.dense()
    F = cfg.transition
    Q = cfg.process_noise.dense() if cfg.process_noise is not None else np.zeros_like(F)
    mean, covariance = cfg.initial_mean.copy(), cfg.initial_covariance.copy()

    posteriors = []
    for y in observations:
        mean = F @ mean
        covariance = F @ covariance @ F.T + Q
        innovation_cov = H @ covariance @ H.T + R
        try:
            factor = np.linalg.cholesky(innovation_cov)
        except np.linalg.LinAlgError:
            raise PenkfError("innovation covariance is not positive definite")
        # K = P Hᵀ (H P Hᵀ + R)⁻¹ through the Cholesky factor
        solved = np.linalg.solve(factor, H @ covariance)
        gain = np.linalg.solve(factor.T, solved).T
        mean = mean + gain @ (np.asarray(y, dtype=float) - H @ mean)
        # Joseph form keeps the covariance symmetric positive semi-definite
        identity_minus = np.eye(F.shape[0]) - gain @ H
        covariance = identity_minus @ covariance @ identity_minus.T + gain @ R @ gain.T
        covariance = 0.5 * (covariance + covariance.T)
        posteriors.append((mean.copy(), covariance.copy()))
    return posteriors


def simulate_truth(
    model: DynamicsModel, x0: ArrayLike, cycles: int, noise_draws: Optional[np.ndarray] = None
) -> List[StateVector]:
    """
    Truth trajectory x_1..x_T from x_0; `noise_draws` (p×T standard normals) are scaled by the
    model's process noise when it has one.
    """
    x = np.asarray(x0, dtype=float)
    trajectory = []
    for t in range(cycles):
        x = model.evolve(x)
        if model.process_noise is not None and noise_draws is not None:
            x = x + model.process_noise.std * noise_draws[:, t]
        if not np.all(np.isfinite(x)):
            raise ModelDivergenceError(f"truth trajectory diverged at cycle {t + 1}")
        trajectory.append(StateVector(x))
    return trajectory
