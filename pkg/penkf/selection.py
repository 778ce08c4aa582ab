"""
Penalty selection along a regularization path.

The penalty constant c_λ is chosen offline: a representative ensemble is drawn from a free model
run, glasso is solved for a decreasing list of penalties (each solution warm-starting the next) and
the solution minimizing an information criterion wins.
"""
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, validator

from penkf.core import DimensionMismatchError, Ensemble, PenkfError, RngStream, SymmetricMatrix, sample_covariance
from penkf.dynamics import DynamicsModel, IntegrationError, ModelDivergenceError
from penkf.glasso import GlassoConvergenceError, PenaltyMatrix, PrecisionEstimate, glasso_solve, kkt_residual
from penkf.logger import get_logger
from penkf.models import Criterion, PathPoint, PathResult

logger = get_logger(__name__)


class SelectionError(PenkfError):
    """
    Raised when no point of the regularization path yields a usable estimate.
    """

    pass


def free_forecast_ensemble(
    model: DynamicsModel, p: int, spacing: int, count: int, rng: RngStream, burn_in: int = 10
) -> Ensemble:
    """
    Representative ensemble from a single free model run started at x₀ ~ N(0, I).

    The state is recorded every `spacing` cycles; the first `burn_in` recorded states are dropped
    and the next `count` become the columns of the ensemble.
    """
    if spacing < 1:
        raise ValueError(f"spacing must be >= 1, got {spacing}")
    if count < 2:
        raise ValueError(f"count must be >= 2, got {count}")
    if burn_in < 0:
        raise ValueError(f"burn_in must be >= 0, got {burn_in}")
    if model.dimension != p:
        raise DimensionMismatchError(f"model has dimension {model.dimension}, requested p={p}")

    x = rng.standard_normal(p)
    recorded: List[np.ndarray] = []
    for t in range(1, (burn_in + count) * spacing + 1):
        try:
            x = model.evolve(x)
        except IntegrationError:
            raise ModelDivergenceError(f"free run diverged at cycle {t}")
        if model.process_noise is not None:
            x = x + model.process_noise.std * rng.standard_normal(p)
        if not np.all(np.isfinite(x)):
            raise ModelDivergenceError(f"free run diverged at cycle {t}")
        if t % spacing == 0:
            recorded.append(x.copy())

    logger.debug(f"free run collected {len(recorded)} states, dropping {burn_in} as burn-in")
    return Ensemble(np.column_stack(recorded[burn_in:]))


def log_likelihood(theta: np.ndarray, S: np.ndarray, n: int) -> float:
    """
    Gaussian log-likelihood (n/2)(log det Θ − tr(SΘ)), up to constants.
    """
    theta = np.asarray(theta, dtype=float)
    try:
        factor = np.linalg.cholesky(0.5 * (theta + theta.T))
    except np.linalg.LinAlgError:
        raise SelectionError("precision estimate is not positive definite")
    logdet = 2.0 * float(np.sum(np.log(np.diag(factor))))
    return 0.5 * n * (logdet - float(np.sum(np.asarray(S) * theta)))


def ebic_score(est: PrecisionEstimate, S: SymmetricMatrix, n: int, gamma: float, p: int) -> float:
    """
    Extended BIC −2ℓ(Θ) + k log(n) + 4kγ log(p), k the number of edges; γ = 0 is the plain BIC.
    """
    if n < 2:
        raise ValueError(f"n must be >= 2, got {n}")
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    k = est.edge_count
    loglik = log_likelihood(est.theta_dense(), np.asarray(S, dtype=float), n)
    return -2.0 * loglik + k * np.log(n) + 4.0 * k * gamma * np.log(p)


class PathConfig(BaseModel):
    # penalty constants, largest first
    c_grid: List[float]
    # per-variable penalty scales λ_R; √R for each variable gives λ = c·√(R log(p)/n)
    scales: List[float]
    # ensemble size entering the penalty formula
    n: int
    # `None` picks eBIC when p > n, BIC otherwise
    criterion: Optional[Criterion] = None
    gamma: float = 0.5
    penalize_diagonal: bool = True
    # score the unpenalized refit restricted to the selected edges instead of the penalized fit
    refit: bool = False
    # rescale the representative covariance to the mean variance of the penalty scales (R)
    normalize: bool = True
    tol: Optional[float] = None
    max_sweeps: Optional[int] = None

    @validator("c_grid")
    def grid_strictly_decreasing(cls, v):
        assert v, "c_grid must not be empty"
        assert all(c > 0 for c in v), "c_grid entries must be positive"
        assert all(a > b for a, b in zip(v, v[1:])), "c_grid must be strictly decreasing"
        return v

    @validator("scales")
    def scales_positive(cls, v):
        assert v and all(s > 0 for s in v), "scales must be positive"
        return v

    @validator("n")
    def n_at_least_two(cls, v):
        assert v >= 2, "n must be >= 2"
        return v

    @validator("gamma")
    def gamma_nonnegative(cls, v):
        assert v >= 0, "gamma must be >= 0"
        return v

    @classmethod
    def default(
        cls,
        p: int,
        n: int,
        variance: float,
        c_min: float = 0.1,
        c_max: float = 10.0,
        size: int = 20,
        **kwargs,
    ) -> "PathConfig":
        """
        `size` log-spaced constants over [c_min, c_max] with the scalar rule λ = c·√(R log(p)/n).
        """
        grid = np.geomspace(c_max, c_min, size)
        return cls(c_grid=[float(c) for c in grid], scales=[float(np.sqrt(variance))] * p, n=n, **kwargs)

    @property
    def p(self) -> int:
        return len(self.scales)

    @property
    def base_scale(self) -> float:
        """
        Largest off-diagonal penalty per unit c, √(R log(p)/n) for constant scales.
        """
        return float(max(self.scales) * np.sqrt(np.log(self.p) / self.n))

    @property
    def reference_variance(self) -> float:
        return float(np.mean(np.square(self.scales)))

    def penalty(self, c: float) -> PenaltyMatrix:
        return PenaltyMatrix.scaled(c, self.scales, self.n, penalize_diagonal=self.penalize_diagonal)

    def resolve_criterion(self, p: int, n: int) -> Tuple[Criterion, float]:
        criterion = self.criterion
        if criterion is None:
            criterion = Criterion.EBIC if p > n else Criterion.BIC
        criterion = Criterion(criterion)
        return criterion, (self.gamma if criterion == Criterion.EBIC else 0.0)


def _largest_offdiagonal(penalty: PenaltyMatrix) -> float:
    entries = penalty.entries
    if entries.shape[0] == 1:
        return float(entries[0, 0])
    return float(np.max(entries[~np.eye(entries.shape[0], dtype=bool)]))


def normalize_covariance(S: SymmetricMatrix, variance: float) -> np.ndarray:
    """
    S scaled so that its mean diagonal equals `variance`.

    Penalized solutions are equivariant under (S, Λ) → (aS, aΛ), so a climatological covariance is
    brought to the scale the penalty formula is written for before the path is solved.
    """
    S = np.asarray(S, dtype=float)
    mean_variance = float(np.mean(np.diag(S)))
    if mean_variance <= 0:
        raise SelectionError("representative covariance has no variance")
    return S * (variance / mean_variance)


def refit_penalty(est: PrecisionEstimate) -> PenaltyMatrix:
    """
    Zero penalty on the diagonal and on the support of Θ, +inf elsewhere.
    """
    support = est.theta_dense() != 0
    np.fill_diagonal(support, True)
    return PenaltyMatrix(np.where(support, 0.0, np.inf))


def select_penalty(representative: Ensemble, path_cfg: PathConfig) -> Tuple[float, PathResult]:
    """
    Solve glasso along `path_cfg.c_grid` with warm starts and pick the criterion minimizer.

    Points whose solve does not converge are kept in the path with `converged=False` and never
    chosen. With `normalize`, log-likelihoods and scores refer to the rescaled covariance.

    :raises SelectionError: no grid point converged.
    """
    if representative.n < 2:
        raise ValueError(f"representative ensemble needs n >= 2, got {representative.n}")
    p, n = representative.p, representative.n
    if path_cfg.p != p:
        raise DimensionMismatchError(f"path has {path_cfg.p} penalty scales, ensemble p={p}")
    S = sample_covariance(representative)
    if path_cfg.normalize:
        S = normalize_covariance(S, path_cfg.reference_variance)
    criterion, gamma = path_cfg.resolve_criterion(p, n)
    logger.info(f"selecting c_lambda over {len(path_cfg.c_grid)} points with {criterion.value} (p={p}, n={n})")

    points: List[PathPoint] = []
    previous: Optional[PrecisionEstimate] = None
    for c in path_cfg.c_grid:
        penalty = path_cfg.penalty(c)
        lam = _largest_offdiagonal(penalty)
        try:
            est = glasso_solve(S, penalty, tol=path_cfg.tol, max_sweeps=path_cfg.max_sweeps, warm_start=previous)
        except GlassoConvergenceError as e:
            logger.warning(f"path point c={c:.4g} did not converge (residual {e.residual:.3e})")
            points.append(PathPoint(c=c, lam=lam, kkt_residual=e.residual, converged=False))
            continue
        previous = est

        scored = est
        if path_cfg.refit:
            try:
                scored = glasso_solve(S, refit_penalty(est), tol=path_cfg.tol, max_sweeps=path_cfg.max_sweeps)
            except PenkfError as e:
                logger.warning(f"refit at c={c:.4g} failed: {e}")
                points.append(
                    PathPoint(c=c, lam=lam, edges=est.edge_count, kkt_residual=kkt_residual(S, est), converged=False)
                )
                continue

        loglik = log_likelihood(scored.theta_dense(), np.asarray(S), n)
        score = ebic_score(scored, S, n, gamma, p)
        points.append(
            PathPoint(
                c=c,
                lam=lam,
                edges=est.edge_count,
                loglik=loglik,
                score=score,
                kkt_residual=kkt_residual(S, est),
            )
        )
        logger.debug(f"c={c:.4g} lambda={lam:.4g} edges={est.edge_count} score={score:.6g}")

    scored_points = [i for i, pt in enumerate(points) if pt.converged and pt.score is not None]
    if not scored_points:
        raise SelectionError(f"none of the {len(points)} path points converged")
    if len(scored_points) < len(points):
        logger.warning(f"{len(points) - len(scored_points)} of {len(points)} path points excluded from selection")
    chosen = min(scored_points, key=lambda i: points[i].score)  # first minimizer on ties

    path = PathResult(points=points, chosen_index=chosen, criterion=criterion.value, gamma=gamma, p=p, n=n)
    logger.info(f"selected c_lambda={path.chosen.c:.4g} with {path.chosen.edges} edges")
    return path.chosen.c, path
