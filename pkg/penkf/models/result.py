import math
from typing import Dict, List, Optional

from pydantic import BaseModel, root_validator, validator


class PathPoint(BaseModel):
    c: float
    lam: float
    edges: Optional[int] = None
    loglik: Optional[float] = None
    score: Optional[float] = None
    kkt_residual: Optional[float] = None
    converged: bool = True


class PathResult(BaseModel):
    points: List[PathPoint]
    chosen_index: int
    criterion: str
    gamma: float
    p: int
    n: int

    @root_validator(skip_on_failure=True)
    def chosen_point_minimizes_score(cls, values):
        scores = [pt.score for pt in values["points"] if pt.converged and pt.score is not None]
        chosen = values["points"][values["chosen_index"]]
        assert chosen.converged and chosen.score is not None, "chosen point did not converge"
        assert chosen.score <= min(scores), "chosen point does not minimize the criterion"
        return values

    @property
    def chosen(self) -> PathPoint:
        return self.points[self.chosen_index]


class TrialResult(BaseModel):
    trial: int
    method: str
    rmse_series: List[float] = []
    spread_series: List[float] = []
    wall_time: float = 0.0
    diverged: bool = False
    diverged_at: Optional[int] = None
    # penkf only
    lam: Optional[float] = None
    edge_counts: List[int] = []
    precision_snapshots: Dict[int, List[List[float]]] = {}

    @root_validator(skip_on_failure=True)
    def rmse_is_finite_unless_diverged(cls, values):
        if not values["diverged"]:
            assert all(math.isfinite(v) and v >= 0 for v in values["rmse_series"]), "rmse must be finite and >= 0"
        return values


class SummaryRow(BaseModel):
    method: str
    q10: Optional[float] = None
    q50: Optional[float] = None
    mean: Optional[float] = None
    q90: Optional[float] = None
    sd_q10: Optional[float] = None
    sd_q50: Optional[float] = None
    sd_mean: Optional[float] = None
    sd_q90: Optional[float] = None
    ci_low: Optional[float] = None
    ci_high: Optional[float] = None
    trials: int = 0
    divergent: int = 0

    @root_validator(skip_on_failure=True)
    def quantiles_are_ordered(cls, values):
        q10, q50, q90 = values["q10"], values["q50"], values["q90"]
        if None not in (q10, q50, q90):
            # averaged per-trial quantiles keep their order up to rounding
            assert q10 <= q50 + 1e-12 and q50 <= q90 + 1e-12, "expected q10 <= q50 <= q90"
        return values


class SummaryTable(BaseModel):
    rows: List[SummaryRow]
    # per-trial quantiles with linear interpolation, averaged over trials
    quantile_method: str = "linear"

    def row(self, method: str) -> SummaryRow:
        for row in self.rows:
            if row.method == method:
                return row
        raise KeyError(f"no summary for method {method}")


class PrecisionProfile(BaseModel):
    offsets: List[int]
    values: List[float]
    snapshots: int

    def value_at(self, offset: int) -> float:
        return self.values[self.offsets.index(offset)]


class SweepPoint(BaseModel):
    p: int
    c_lambda: Optional[float] = None
    summary: SummaryTable


class DimensionSweep(BaseModel):
    points: List[SweepPoint]

    @validator("points")
    def dimensions_not_duplicated(cls, v):
        dims = [pt.p for pt in v]
        assert len(set(dims)) == len(dims), "found duplicated dimensions in sweep"
        return v


class GainErrorRow(BaseModel):
    trial: int
    sse_sample: float
    sse_tapered: float
    sse_penalized: float


class GainErrorResult(BaseModel):
    rows: List[GainErrorRow]
    p: int
    n: int
    reference_n: int
    checkpoints: List[int]

    @property
    def fraction_penalized_better(self) -> float:
        if not self.rows:
            return 0.0
        return sum(row.sse_penalized < row.sse_sample for row in self.rows) / len(self.rows)

    def mean_sse(self) -> Dict[str, float]:
        k = max(len(self.rows), 1)
        return {
            "sample": sum(row.sse_sample for row in self.rows) / k,
            "tapered": sum(row.sse_tapered for row in self.rows) / k,
            "penalized": sum(row.sse_penalized for row in self.rows) / k,
        }
