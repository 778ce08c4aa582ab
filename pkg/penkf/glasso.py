"""
ℓ1-penalized log-determinant estimation of sparse precision matrices.

Solves

    argmin_{Θ ≻ 0}  −log det Θ + tr(ΘS) + Σ_ij Λ_ij |Θ_ij|

by blockwise coordinate descent over the columns of W = Θ⁻¹, each block being a lasso problem
solved by cyclic coordinate descent (the graphical lasso scheme). The diagonal is penalized, so at
the solution W_ii = S_ii + Λ_ii. Entries of Λ may be +inf, which pins Θ_ij to zero.
"""
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
from numba import njit
from scipy import io as sio
from scipy import linalg, sparse

from penkf.config import settings
from penkf.core import (
    ArrayLike,
    DimensionMismatchError,
    Ensemble,
    InvalidParameterError,
    PenkfError,
    SymmetricMatrix,
    sample_covariance,
)
from penkf.logger import get_logger

logger = get_logger(__name__)

MAX_INNER_ITERATIONS = 1000


class GlassoConvergenceError(PenkfError):
    """
    Raised when coordinate descent does not meet the stopping rule within the sweep budget.
    """

    def __init__(self, message: str, residual: float, sweeps: int):
        super().__init__(message)
        self.residual = residual
        self.sweeps = sweeps


class SingularCovarianceError(PenkfError):
    """
    Raised when an unpenalized problem is posed on a singular covariance.
    """

    pass


class InvalidCovarianceError(PenkfError):
    """
    Raised when the input covariance is not a valid sample covariance (e.g. nonpositive diagonal).
    """

    pass


class PenaltyMatrix:
    """
    Symmetric elementwise penalty Λ with nonnegative (possibly infinite) entries.
    """

    __slots__ = ("entries",)

    def __init__(self, entries: ArrayLike):
        entries = np.array(entries, dtype=float)
        if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
            raise DimensionMismatchError(f"penalty must be square, got shape {entries.shape}")
        if np.any(np.isnan(entries)) or np.any(entries < 0):
            raise InvalidParameterError("penalty entries must be nonnegative")
        finite = np.isfinite(entries)
        if not np.array_equal(finite, finite.T) or not np.allclose(
            np.where(finite, entries, 0.0), np.where(finite.T, entries.T, 0.0), rtol=0, atol=1e-12
        ):
            raise InvalidParameterError("penalty must be symmetric")
        entries.flags.writeable = False
        self.entries = entries

    @classmethod
    def scalar(cls, p: int, lam: float, penalize_diagonal: bool = True) -> "PenaltyMatrix":
        entries = np.full((p, p), float(lam))
        if not penalize_diagonal:
            np.fill_diagonal(entries, 0.0)
        return cls(entries)

    @classmethod
    def scaled(cls, c: float, scales: ArrayLike, n: int, penalize_diagonal: bool = True) -> "PenaltyMatrix":
        """
        Λ = c·√(λ_R λ_Rᵀ log(p) / n) for a vector of per-variable scales λ_R.

        A constant vector of observation variances R gives the scalar rule λ = c·√(R log(p) / n).
        """
        scales = np.asarray(scales, dtype=float)
        p = scales.shape[0]
        entries = c * np.sqrt(np.outer(scales, scales) * np.log(p) / n)
        if not penalize_diagonal:
            np.fill_diagonal(entries, 0.0)
        return cls(entries)

    @property
    def p(self) -> int:
        return self.entries.shape[0]

    def __repr__(self) -> str:
        return f"PenaltyMatrix(p={self.p})"


@dataclass
class PrecisionEstimate:
    """
    Solution of the penalized problem.

    `theta` holds the sparse precision Θ (CSR, exact zeros not stored), `w` its dense inverse
    W = Θ⁻¹, used as the penalized forecast covariance. `subgradient` is Z̃ = (W − S)/Λ on entries
    with finite positive penalty and 0 elsewhere, so that W = S + Λ∘Z̃ there.
    """

    theta: sparse.csr_matrix
    w: np.ndarray
    penalty: PenaltyMatrix
    edge_count: int
    subgradient: np.ndarray
    sweeps: int = 0
    residual: float = 0.0
    # lasso coefficients per column, kept for warm starts
    coefficients: Optional[np.ndarray] = None

    @property
    def p(self) -> int:
        return self.w.shape[0]

    def theta_dense(self) -> np.ndarray:
        return self.theta.toarray()

    def to_matrix_market(self, path: Union[str, Path]) -> Path:
        return write_matrix_market(self.theta, path, comment=f"penalized precision, {self.edge_count} edges")


def write_matrix_market(theta: Union[sparse.spmatrix, ArrayLike], path: Union[str, Path], comment: str = "") -> Path:
    """
    Symmetric MatrixMarket dump of a precision matrix; returns the path written.
    """
    path = Path(path)
    matrix = theta if sparse.issparse(theta) else sparse.csr_matrix(np.asarray(theta, dtype=float))
    sio.mmwrite(str(path), matrix, comment=comment, symmetry="symmetric")
    # scipy appends the extension when it is missing
    return path if path.suffix == ".mtx" else path.with_suffix(path.suffix + ".mtx")


@njit(cache=True, nogil=True)
def _lasso_block(V: np.ndarray, s: np.ndarray, rho: np.ndarray, beta: np.ndarray, tol: float) -> None:
    """
    Cyclic coordinate descent for min_β ½βᵀVβ − sᵀβ + Σ ρ_k|β_k|, updating `beta` in place.

    An infinite ρ_k keeps β_k at zero.
    """
    m = beta.shape[0]
    gradient = np.zeros(m)
    for a in range(m):
        for b in range(m):
            gradient[a] += V[a, b] * beta[b]
    for _ in range(MAX_INNER_ITERATIONS):
        max_change = 0.0
        for k in range(m):
            old = beta[k]
            partial = s[k] - gradient[k] + V[k, k] * old
            if partial > rho[k]:
                new = (partial - rho[k]) / V[k, k]
            elif partial < -rho[k]:
                new = (partial + rho[k]) / V[k, k]
            else:
                new = 0.0
            delta = new - old
            if delta != 0.0:
                for a in range(m):
                    gradient[a] += V[a, k] * delta
                beta[k] = new
                max_change = max(max_change, abs(delta) * V[k, k])
        if max_change < tol:
            break


@njit(cache=True, nogil=True)
def _sweep(W: np.ndarray, B: np.ndarray, S: np.ndarray, lam: np.ndarray, tol: float) -> None:
    """
    One pass over the columns of W: column j is replaced by W₁₁β_j, β_j the lasso solution
    against the block W₁₁ without row and column j. W and B are updated in place.
    """
    p = W.shape[0]
    m = p - 1
    others = np.empty(m, dtype=np.int64)
    V = np.empty((m, m))
    s = np.empty(m)
    rho = np.empty(m)
    beta = np.empty(m)
    for j in range(p):
        k = 0
        for i in range(p):
            if i != j:
                others[k] = i
                k += 1
        for a in range(m):
            s[a] = S[others[a], j]
            rho[a] = lam[others[a], j]
            beta[a] = B[others[a], j]
            for b in range(m):
                V[a, b] = W[others[a], others[b]]
        _lasso_block(V, s, rho, beta, tol)
        for a in range(m):
            w12 = 0.0
            for b in range(m):
                w12 += V[a, b] * beta[b]
            W[others[a], j] = w12
            W[j, others[a]] = w12
            B[others[a], j] = beta[a]


def _recover_theta(W: np.ndarray, B: np.ndarray) -> np.ndarray:
    """
    Θ from W and the lasso coefficients: Θ_jj = 1/(W_jj − w_jᵀβ_j), Θ_{-j,j} = −β_j Θ_jj.
    """
    schur = np.diag(W) - np.sum(W * B, axis=0)
    if np.any(schur <= 0):
        raise linalg.LinAlgError("lost positive definiteness while recovering the precision matrix")
    theta = -B / schur[None, :]
    np.fill_diagonal(theta, 1.0 / schur)
    return 0.5 * (theta + theta.T)


def _edge_count(theta: np.ndarray) -> int:
    return int(np.count_nonzero(np.triu(theta, k=1)))


def _subgradient(S: np.ndarray, W: np.ndarray, lam: np.ndarray) -> np.ndarray:
    active = np.isfinite(lam) & (lam > 0)
    return np.where(active, (W - S) / np.where(active, lam, 1.0), 0.0)


def _estimate(
    S: np.ndarray, theta: np.ndarray, W: np.ndarray, penalty: PenaltyMatrix, sweeps: int, B: Optional[np.ndarray]
) -> PrecisionEstimate:
    estimate = PrecisionEstimate(
        theta=sparse.csr_matrix(theta),
        w=W,
        penalty=penalty,
        edge_count=_edge_count(theta),
        subgradient=_subgradient(S, W, penalty.entries),
        sweeps=sweeps,
        coefficients=B,
    )
    estimate.residual = kkt_residual(S, estimate)
    return estimate


def _as_covariance(S: Union[SymmetricMatrix, ArrayLike]) -> np.ndarray:
    S = np.array(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise DimensionMismatchError(f"covariance must be square, got shape {S.shape}")
    if not np.all(np.isfinite(S)):
        raise InvalidCovarianceError("covariance contains non-finite entries")
    if np.any(np.diag(S) <= 0):
        raise InvalidCovarianceError("covariance must have a strictly positive diagonal")
    return 0.5 * (S + S.T)


def kkt_residual(S: Union[SymmetricMatrix, ArrayLike], est: PrecisionEstimate) -> float:
    """
    Largest violation of the optimality conditions S − W + Λ∘∂‖Θ‖₁ ∋ 0.

    Nonzero Θ_ij contribute |S_ij − W_ij + Λ_ij·sign(Θ_ij)|, zero Θ_ij contribute
    max(0, |S_ij − W_ij| − Λ_ij). Entries with infinite penalty are constraints and never violate.
    W is checked against Θ as well: the residual is never below ‖ΘW − I‖_max, so an estimate whose
    Θ no longer inverts W is flagged.
    """
    S = np.asarray(S, dtype=float)
    theta = est.theta_dense()
    lam = est.penalty.entries
    finite = np.isfinite(lam)
    lam_finite = np.where(finite, lam, 0.0)
    gap = S - est.w
    nonzero = theta != 0
    on_support = np.where(nonzero & finite, np.abs(gap + lam_finite * np.sign(theta)), 0.0)
    off_support = np.where(~nonzero & finite, np.maximum(0.0, np.abs(gap) - lam_finite), 0.0)
    # an infinite penalty on a nonzero entry is an outright violation
    pinned = np.where(nonzero & ~finite, np.inf, 0.0)
    consistency = np.abs(theta @ est.w - np.eye(theta.shape[0]))
    return float(max(on_support.max(), off_support.max(), pinned.max(), consistency.max()))


def glasso_objective(
    S: Union[SymmetricMatrix, ArrayLike], theta: Union[np.ndarray, sparse.spmatrix], penalty: PenaltyMatrix
) -> float:
    """
    −log det Θ + tr(ΘS) + Σ Λ_ij|Θ_ij|, +inf outside the positive definite cone.
    """
    S = np.asarray(S, dtype=float)
    theta = theta.toarray() if sparse.issparse(theta) else np.asarray(theta, dtype=float)
    sign, logdet = np.linalg.slogdet(theta)
    if sign <= 0:
        return float("inf")
    penalty_term = np.sum(np.where(theta != 0, penalty.entries * np.abs(theta), 0.0))
    return float(-logdet + np.sum(theta * S) + penalty_term)


def duality_gap(S: Union[SymmetricMatrix, ArrayLike], est: PrecisionEstimate) -> float:
    """
    Primal objective at Θ minus the dual objective log det W + p at the box-feasible projection of W.

    The dual problem maximizes log det W subject to |W_ij − S_ij| ≤ Λ_ij, so the gap bounds the
    distance of the primal objective from its optimum.
    """
    S = np.asarray(S, dtype=float)
    lam = est.penalty.entries
    W = np.clip(est.w, S - lam, S + lam)
    sign, logdet = np.linalg.slogdet(W)
    if sign <= 0:
        return float("inf")
    return glasso_objective(S, est.theta, est.penalty) - (logdet + S.shape[0])


def glasso_solve(
    S: Union[SymmetricMatrix, ArrayLike],
    penalty: PenaltyMatrix,
    tol: Optional[float] = None,
    max_sweeps: Optional[int] = None,
    warm_start: Optional[PrecisionEstimate] = None,
) -> PrecisionEstimate:
    """
    Sparse precision estimate for covariance `S` under elementwise penalty `penalty`.

    Stops once the mean absolute change of the off-diagonal of W over a sweep drops below
    tol·mean|S_offdiag| and both the KKT residual (relative to max(1, max|S|)) and ‖ΘW − I‖_max are
    below `tol`.

    :param warm_start: previous solution (e.g. the next larger penalty on a path); it changes the
        starting point only, never the minimizer.
    :raises GlassoConvergenceError: stopping rule not met within `max_sweeps`.
    :raises SingularCovarianceError: zero penalty everywhere on a singular `S`.
    """
    tol = settings.GLASSO_TOL if tol is None else tol
    max_sweeps = settings.GLASSO_MAX_SWEEPS if max_sweeps is None else max_sweeps

    S = _as_covariance(S)
    p = S.shape[0]
    if penalty.p != p:
        raise DimensionMismatchError(f"penalty is {penalty.p}×{penalty.p}, covariance {p}×{p}")
    lam = penalty.entries
    diagonal_lam = np.diag(lam)
    if not np.all(np.isfinite(diagonal_lam)):
        raise InvalidParameterError("diagonal penalties must be finite")
    offdiagonal = ~np.eye(p, dtype=bool)

    # unpenalized problem: the maximum likelihood estimate, which needs a nonsingular S
    if not np.any(lam > 0):
        try:
            factor = linalg.cho_factor(S, lower=True)
        except linalg.LinAlgError:
            raise SingularCovarianceError("covariance is singular and no penalty was given")
        theta = linalg.cho_solve(factor, np.eye(p))
        theta = 0.5 * (theta + theta.T)
        return _estimate(S, theta, S.copy(), penalty, 0, None)

    # every off-diagonal entry below its penalty: the solution is diagonal
    if np.all(np.abs(S[offdiagonal]) <= lam[offdiagonal]):
        W = np.diag(np.diag(S) + diagonal_lam)
        return _estimate(S, np.diag(1.0 / np.diag(W)), W, penalty, 0, np.zeros((p, p)))

    W = S.copy()
    B = np.zeros((p, p))
    if warm_start is not None and warm_start.p == p:
        W = warm_start.w.copy()
        if warm_start.coefficients is not None:
            B = warm_start.coefficients.copy()
        else:
            warm_theta = warm_start.theta_dense()
            B = -warm_theta / np.diag(warm_theta)[None, :]
            np.fill_diagonal(B, 0.0)
    np.fill_diagonal(W, np.diag(S) + diagonal_lam)
    if warm_start is not None:
        try:
            np.linalg.cholesky(W)
        except np.linalg.LinAlgError:
            # resetting the diagonal for a new S can leave the cone: start cold instead
            logger.debug("warm start is not positive definite for this covariance, starting cold")
            W = S.copy()
            np.fill_diagonal(W, np.diag(S) + diagonal_lam)
            B = np.zeros((p, p))

    scale = max(1.0, float(np.max(np.abs(S))))
    mean_offdiagonal = float(np.mean(np.abs(S[offdiagonal]))) if p > 1 else 0.0
    change_threshold = tol * (mean_offdiagonal if mean_offdiagonal > 0 else 1.0)
    inner_tol = 1e-2 * tol * scale
    # tightened once W has settled but the residual has not
    min_inner_tol = 1e-6 * inner_tol

    residual = float("inf")
    for sweep in range(1, max_sweeps + 1):
        previous = W.copy()
        _sweep(W, B, S, lam, inner_tol)
        change = float(np.mean(np.abs(W - previous)[offdiagonal]))
        try:
            theta = _recover_theta(W, B)
        except linalg.LinAlgError:
            continue
        estimate = _estimate(S, theta, W.copy(), penalty, sweep, B.copy())
        identity_residual = float(np.max(np.abs(theta @ W - np.eye(p))))
        residual = max(estimate.residual / scale, identity_residual)
        if change < change_threshold and residual <= tol:
            logger.debug(f"glasso converged after {sweep} sweeps with {estimate.edge_count} edges")
            return estimate
        if change < change_threshold and inner_tol > min_inner_tol:
            inner_tol = max(0.1 * inner_tol, min_inner_tol)

    logger.warning(f"glasso did not converge in {max_sweeps} sweeps (residual {residual:.3e})")
    raise GlassoConvergenceError(
        f"glasso did not converge in {max_sweeps} sweeps, last residual {residual:.3e}",
        residual=residual,
        sweeps=max_sweeps,
    )


def penalized_forecast_cov(
    forecast: Ensemble,
    penalty: PenaltyMatrix,
    tol: Optional[float] = None,
    max_sweeps: Optional[int] = None,
    warm_start: Optional[PrecisionEstimate] = None,
) -> PrecisionEstimate:
    """
    Penalized forecast covariance P̃ᶠ = P̂ᶠ + Λ∘Z̃ of an ensemble, returned with its sparse inverse.
    """
    return glasso_solve(sample_covariance(forecast), penalty, tol=tol, max_sweeps=max_sweeps, warm_start=warm_start)
