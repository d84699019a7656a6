from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import List, Literal, Optional

from partition import NormScheme


class WeightDecayConfig(BaseModel):
    """Model for weight decay settings (`wd.*` keys in experiment configs)"""
    model_config = ConfigDict(populate_by_name=True, frozen=True)

    delta: float = Field(default=0.0, ge=0.0, lt=1.0)
    gamma_target: float = 1.0
    apply_to_norm_params: bool = Field(default=False, alias="norm_params")
    apply_to_weights: bool = Field(default=False, alias="weights")

    @field_validator("gamma_target")
    @classmethod
    def _target_is_zero_or_one(cls, value: float) -> float:
        if value not in (0.0, 1.0):
            raise ValueError(f"gamma_target must be 0 or 1, got {value}")
        return float(value)


class SyntheticSpec(BaseModel):
    """Model for the class-conditional synthetic image dataset"""
    n_classes: int = Field(default=8, ge=1)
    n_train_per_class: int = Field(default=64, ge=1)
    n_val_per_class: int = Field(default=32, ge=1)
    n_test_per_class: int = Field(default=32, ge=1)
    channels: int = Field(default=4, ge=1)
    height: int = Field(default=8, ge=1)
    width: int = Field(default=8, ge=1)
    separation: float = Field(default=1.0, ge=0.0)
    noise: float = Field(default=1.0, ge=0.0)
    seed: int = 0


class ModelSpec(BaseModel):
    """Model for the host network: widths of the pointwise-mixing blocks"""
    widths: List[int] = Field(default_factory=lambda: [16, 16], min_length=1)

    @field_validator("widths")
    @classmethod
    def _positive_widths(cls, value: List[int]) -> List[int]:
        if any(w < 1 for w in value):
            raise ValueError(f"block widths must be >= 1, got {value}")
        return value


class TrainConfig(BaseModel):
    """Model for one training run"""
    batch_size: int = Field(default=32, ge=1)
    learning_rate: float = Field(default=0.05, ge=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    epochs: int = Field(default=10, ge=1)
    wd: WeightDecayConfig = Field(default_factory=WeightDecayConfig)
    scheme: NormScheme = Field(default_factory=NormScheme)
    alpha_grid: List[float] = Field(default_factory=lambda: [0.0])
    seed: int = 0
    epsilon: float = Field(default=1e-5, gt=0.0)
    rho: float = Field(default=0.99, gt=0.0, lt=1.0)
    sampling: Literal["iid", "non_iid"] = "iid"
    classes_per_batch: Optional[int] = Field(default=None, ge=1)
    eval_every: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def _check_sampling(self):
        if self.sampling == "non_iid":
            if self.classes_per_batch is None:
                raise ValueError("non_iid sampling needs classes_per_batch")
            if self.batch_size % self.classes_per_batch != 0:
                raise ValueError(
                    f"classes_per_batch {self.classes_per_batch} does not divide "
                    f"batch size {self.batch_size}")
        if any(a < 0.0 for a in self.alpha_grid):
            raise ValueError("alpha grid values must be >= 0")
        return self


class CompareCell(BaseModel):
    """One batch size of the scheme comparison grid and the schemes run at it"""
    batch_size: int = Field(ge=1)
    schemes: List[NormScheme] = Field(min_length=1)


def _default_compare() -> List[CompareCell]:
    return [
        CompareCell(batch_size=1, schemes=["group:4", "batchgroup:1:4"]),
        CompareCell(batch_size=2, schemes=["batch", "group:4", "batchgroup:2:4"]),
        CompareCell(batch_size=8, schemes=["batch", "ghost:2", "group:4", "batchgroup:2:4"]),
        CompareCell(batch_size=32, schemes=["batch", "ghost:8", "group:4", "batchgroup:4:4"]),
    ]


class ExperimentSpec(BaseModel):
    """Model for a harness experiment (the JSON passed with --config)"""
    command: Optional[Literal["sweep-alpha", "sweep-ghost", "compare", "non-iid",
                              "bounds", "weight-decay"]] = None
    dataset: SyntheticSpec = Field(default_factory=SyntheticSpec)
    model: ModelSpec = Field(default_factory=ModelSpec)
    train: TrainConfig = Field(default_factory=TrainConfig)
    alpha_grid: List[float] = Field(
        default_factory=lambda: [0.0, 0.05, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0], min_length=1)
    ghost_sizes: List[int] = Field(default_factory=lambda: [2, 4, 8, 16, 32], min_length=1)
    compare: List[CompareCell] = Field(default_factory=_default_compare, min_length=1)
    batch_group: NormScheme = Field(
        default_factory=lambda: NormScheme.model_validate("batchgroup:2:4"))
    classes_per_batch: int = Field(default=4, ge=1)
    iid_control: bool = True
    tightness_B: int = Field(default=32, ge=2)
    tightness_a: List[float] = Field(
        default_factory=lambda: [0.0, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 1e2, 1e3, 1e4, 1e6])
    bound_alpha: float = Field(default=0.0, ge=0.0, le=1.0)
    selection_metric: Literal["accuracy", "xent"] = "accuracy"
    allow_alpha_extrapolation: bool = False
    checkpoint: Optional[str] = None
    n_seeds: int = Field(default=1, ge=1)
    seed: int = 0
    out: str = "output"
    jobs: int = Field(default=1, ge=1)

    @field_validator("ghost_sizes")
    @classmethod
    def _positive_ghost_sizes(cls, value: List[int]) -> List[int]:
        if any(g < 1 for g in value):
            raise ValueError(f"ghost sizes must be >= 1, got {value}")
        return value

    @model_validator(mode="after")
    def _check_alpha_grid(self):
        for alpha in self.alpha_grid:
            if alpha < 0.0:
                raise ValueError(f"alpha grid values must be >= 0, got {alpha}")
            if alpha > 1.0 and not self.allow_alpha_extrapolation:
                raise ValueError(
                    f"alpha {alpha} > 1 needs allow_alpha_extrapolation: true")
        return self


class JobResponse(BaseModel):
    """Response model for a submitted experiment job"""
    status: str
    job_id: str
    message: str


class JobStatus(BaseModel):
    """Status model for a running or finished experiment job"""
    job_id: str
    command: str
    status: str
    files: List[str] = Field(default_factory=list)
    error: Optional[str] = None
