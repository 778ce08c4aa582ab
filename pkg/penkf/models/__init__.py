from .experiment import (
    Criterion,
    ExperimentConfig,
    FilterKind,
    FilterSpec,
    InitialEnsemble,
    ModelKind,
    ModelSpec,
    ObservationSpec,
    SelectionSpec,
)
from .result import (
    DimensionSweep,
    GainErrorResult,
    GainErrorRow,
    PathPoint,
    PathResult,
    PrecisionProfile,
    SummaryRow,
    SummaryTable,
    SweepPoint,
    TrialResult,
)

__all__ = [
    "Criterion",
    "DimensionSweep",
    "ExperimentConfig",
    "FilterKind",
    "FilterSpec",
    "GainErrorResult",
    "GainErrorRow",
    "InitialEnsemble",
    "ModelKind",
    "ModelSpec",
    "ObservationSpec",
    "PathPoint",
    "PathResult",
    "PrecisionProfile",
    "SelectionSpec",
    "SummaryRow",
    "SummaryTable",
    "SweepPoint",
    "TrialResult",
]
