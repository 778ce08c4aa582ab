from enum import Enum
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, root_validator, validator

from penkf.core import DiagonalCovariance
from penkf.dynamics import DynamicsModel, LinearModel, Lorenz96Config, identity_model, lorenz96_model
from penkf.filters import ObservationOperator


class ModelKind(str, Enum):
    LORENZ96 = "lorenz96"
    LINEAR = "linear"
    IDENTITY = "identity"


class FilterKind(str, Enum):
    ENKF = "enkf"
    TAPER = "taper"
    PENKF = "penkf"


class InitialEnsemble(str, Enum):
    STANDARD_NORMAL = "standard_normal"
    FREE_RUN = "free_run"


class Criterion(str, Enum):
    EBIC = "ebic"
    BIC = "bic"


class ModelSpec(BaseModel):
    kind: ModelKind = ModelKind.LORENZ96
    p: int = 40
    forcing: float = 8.0
    rk4_dt: float = 0.01
    steps_per_cycle: int = 40
    # linear models only
    transition: Optional[List[List[float]]] = None
    process_variance: Optional[float] = None

    @validator("p")
    def p_positive(cls, v):
        assert v >= 1, "p must be >= 1"
        return v

    @validator("process_variance")
    def process_variance_positive(cls, v):
        assert v is None or v > 0, "process_variance must be positive, omit it for noiseless dynamics"
        return v

    @root_validator(skip_on_failure=True)
    def kind_specific_fields(cls, values):
        kind, p = values["kind"], values["p"]
        if kind == ModelKind.LORENZ96:
            assert p >= 4, "lorenz96 needs p >= 4"
        if kind == ModelKind.LINEAR:
            transition = values.get("transition")
            assert transition is not None, "linear models need a transition matrix"
            assert len(transition) == p and all(len(row) == p for row in transition), "transition must be p×p"
        return values

    def build(self) -> DynamicsModel:
        if self.kind == ModelKind.LORENZ96:
            return lorenz96_model(
                Lorenz96Config(p=self.p, forcing=self.forcing, rk4_dt=self.rk4_dt, steps_per_cycle=self.steps_per_cycle)
            )
        noise = DiagonalCovariance.isotropic(self.p, self.process_variance) if self.process_variance else None
        if self.kind == ModelKind.LINEAR:
            return LinearModel(np.array(self.transition), noise)
        return identity_model(self.p) if noise is None else LinearModel(np.eye(self.p), noise)

    class Config:
        use_enum_values = True


class ObservationSpec(BaseModel):
    # 0-based; the defaults observe x_1, x_3, ... in 1-based numbering
    offset: int = 0
    stride: int = 2
    indices: Optional[List[int]] = None
    variance: float = 0.5

    @validator("variance")
    def variance_positive(cls, v):
        assert v > 0, "observation variance must be positive"
        return v

    @validator("stride")
    def stride_positive(cls, v):
        assert v >= 1, "stride must be >= 1"
        return v

    def build(self, p: int) -> ObservationOperator:
        if self.indices is not None:
            return ObservationOperator.from_indices(p, self.indices, self.variance)
        return ObservationOperator.every_other(p, self.variance, offset=self.offset, stride=self.stride)


class FilterSpec(BaseModel):
    kind: FilterKind
    label: Optional[str] = None
    # taper
    taper_half_length: float = 10.0
    cyclic: bool = True
    # penkf; c_lambda is selected on the offline free-run ensemble when omitted
    c_lambda: Optional[float] = None
    penalize_diagonal: bool = True
    tol: Optional[float] = None
    max_sweeps: Optional[int] = None
    warm_start: bool = False

    @validator("taper_half_length")
    def half_length_positive(cls, v):
        assert v > 0, "taper_half_length must be positive"
        return v

    @validator("c_lambda")
    def c_lambda_positive(cls, v):
        assert v is None or v > 0, "c_lambda must be positive"
        return v

    @validator("label")
    def label_is_plain(cls, v):
        assert v is None or (v and all(ch.isalnum() or ch in "-_" for ch in v)), "label must be alphanumeric"
        return v

    @property
    def name(self) -> str:
        return self.label or str(self.kind)

    class Config:
        use_enum_values = True


class SelectionSpec(BaseModel):
    c_min: float = 0.1
    c_max: float = 10.0
    grid_size: int = 20
    # free-run sampling, in assimilation cycles
    spacing: int = 100
    count: Optional[int] = None
    burn_in: int = 10
    gamma: float = 0.5
    criterion: Optional[Criterion] = None
    refit: bool = False
    # path solved on the representative covariance rescaled to the observation variance
    normalize: bool = True

    @root_validator(skip_on_failure=True)
    def grid_is_valid(cls, values):
        assert 0 < values["c_min"] < values["c_max"], "need 0 < c_min < c_max"
        assert values["grid_size"] >= 2, "grid_size must be >= 2"
        assert values["spacing"] >= 1, "spacing must be >= 1"
        assert values["burn_in"] >= 0, "burn_in must be >= 0"
        assert values["count"] is None or values["count"] >= 2, "count must be >= 2"
        return values

    class Config:
        use_enum_values = True


class ExperimentConfig(BaseModel):
    name: str = "experiment"
    model: ModelSpec = ModelSpec()
    observation: ObservationSpec = ObservationSpec()
    methods: List[FilterSpec] = [FilterSpec(kind=FilterKind.TAPER), FilterSpec(kind=FilterKind.PENKF)]
    ensemble_size: int = 25
    cycles: int = 2000
    trials: int = 50
    seed: int = 0
    initial_ensemble: InitialEnsemble = InitialEnsemble.STANDARD_NORMAL
    selection: SelectionSpec = SelectionSpec()
    # cycles at which precision snapshots and gain errors are taken
    checkpoints: List[int] = [500, 1000, 1500, 2000]
    profile_half_width: int = 20
    output_dir: Optional[str] = None

    @validator("name")
    def name_does_not_contain_spaces(cls, v):
        assert v and " " not in v and "/" not in v, "name must be non-empty without spaces or slashes"
        return v

    @validator("trials", "cycles")
    def at_least_one(cls, v):
        assert v >= 1, "must be >= 1"
        return v

    @validator("ensemble_size")
    def at_least_two_members(cls, v):
        assert v >= 2, "ensemble_size must be >= 2"
        return v

    @validator("methods")
    def method_names_not_duplicated(cls, v):
        names = [spec.name for spec in v]
        assert names, "at least one filter method is required"
        assert len(set(names)) == len(names), "found duplicated method names, set `label` to tell them apart"
        return v

    def method(self, name: Optional[str] = None) -> FilterSpec:
        if name is None:
            return self.methods[0]
        for spec in self.methods:
            if spec.name == name:
                return spec
        raise KeyError(f"method {name} is not configured")

    class Config:
        use_enum_values = True
