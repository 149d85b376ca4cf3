from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import List, Optional, Dict, Any, Literal

import config

ExperimentKind = Literal["noise-toy", "imbalance", "cost-sweep", "grid-L", "grid-K", "gradcheck", "seeds"]
Mechanism = Literal["cross-attention", "kem", "skem"]
ScaleConvention = Literal["sqrt", "linear"]
LossKind = Literal["cross-entropy", "mean-squared-error"]
Distribution = Literal["balanced", "long-tail"]


class CostModel(BaseModel):
    model_config = ConfigDict(frozen=True)

    matmul_multiplies: int = Field(0, ge=0)
    softmax_entries: int = Field(0, ge=0)

    @property
    def total(self) -> int:
        return self.matmul_multiplies + self.softmax_entries

    def __add__(self, other: "CostModel") -> "CostModel":
        return CostModel(
            matmul_multiplies=self.matmul_multiplies + other.matmul_multiplies,
            softmax_entries=self.softmax_entries + other.softmax_entries,
        )


class CostReport(BaseModel):
    n_s: int
    d: int
    L: int
    top_k: int
    n_tasks: int
    symbolic_cross: CostModel
    symbolic_kem: CostModel
    symbolic_skem: Optional[CostModel] = None
    measured_cross: Optional[CostModel] = None
    measured_kem: Optional[CostModel] = None
    measured_skem: Optional[CostModel] = None
    ratio: float
    in_regime: bool
    kem_attention_term: int
    kem_projection_term: int

    @property
    def ordering(self) -> str:
        """Mechanisms by symbolic total, cheapest first, e.g. ``kem<skem<cross``."""
        totals = [("kem", self.symbolic_kem.total), ("cross", self.symbolic_cross.total)]
        if self.symbolic_skem is not None:
            totals.append(("skem", self.symbolic_skem.total))
        totals.sort(key=lambda item: item[1])
        text = totals[0][0]
        for (_, previous), (name, total) in zip(totals, totals[1:]):
            text += ("=" if total == previous else "<") + name
        return text

    @property
    def flag(self) -> str:
        return "" if self.in_regime else "out-of-regime"


class GradcheckResult(BaseModel):
    name: str
    passed: bool
    max_relative_error: float
    max_absolute_error: float
    worst_index: int
    coordinates: int
    rtol: float
    atol: float
    seed: Optional[int] = None


class ImbalanceSpec(BaseModel):
    exponent: float = config.IMBALANCE_EXPONENT
    axis: Literal["question-color"] = "question-color"

    def weights(self, classes: int) -> List[float]:
        """p(i) proportional to (i+1)^-exponent, normalized."""
        raw = [(i + 1) ** (-self.exponent) for i in range(classes)]
        total = sum(raw)
        return [w / total for w in raw]


class TaskLossSpec(BaseModel):
    weights: List[float]
    kinds: List[LossKind]

    @model_validator(mode="after")
    def _check(self) -> "TaskLossSpec":
        if len(self.weights) != len(self.kinds):
            raise ValueError("one loss kind per task weight")
        if any(w <= 0 for w in self.weights):
            raise ValueError("task loss weights must be strictly positive")
        return self


class TaskScore(BaseModel):
    value: float
    lower_is_better: bool = False


class MetricRecord(BaseModel):
    metric: str
    task: str
    value: float
    config_hash: str


class DatasetManifest(BaseModel):
    seed: int
    counts: Dict[str, int]
    imbalance: Optional[ImbalanceSpec] = None
    image_size: int
    objects_per_image: int
    question_length: int
    answer_vocabulary: List[str]
    record_layout: List[str]
    files: Dict[str, str]


class ExperimentConfig(BaseModel):
    """Effective configuration of one run; unset size fields take per-kind defaults."""

    model_config = ConfigDict(extra="forbid")

    kind: ExperimentKind = "noise-toy"
    mechanism: Mechanism = "kem"
    seed: int = config.DEFAULT_SEED

    n_tasks: Optional[int] = Field(None, ge=1)
    m: Optional[int] = Field(None, ge=1)
    d: Optional[int] = Field(None, ge=1)
    L: Optional[int] = Field(None, ge=1)
    top_k: Optional[int] = Field(None, ge=1)
    layers: Optional[int] = Field(None, ge=1)
    residual_weight: float = config.RESIDUAL_WEIGHT
    zero_init_attention: bool = False

    etf_scale: Optional[ScaleConvention] = config.ETF_SCALE_CONVENTION

    lr: Optional[float] = Field(None, gt=0)
    weight_decay: float = Field(config.WEIGHT_DECAY, ge=0)
    poly_power: float = Field(config.POLY_POWER, ge=0)
    beta1: float = config.ADAM_BETA1
    beta2: float = config.ADAM_BETA2
    eps: float = config.ADAM_EPS
    steps: Optional[int] = Field(None, ge=0)
    steps_per_epoch: Optional[int] = Field(None, ge=1)
    batch_size: Optional[int] = Field(None, ge=1)
    eval_size: Optional[int] = Field(None, ge=1)
    loss_weights: Optional[List[float]] = None

    train_count: int = Field(config.CLEVR_TRAIN_COUNT, ge=1)
    imbalance_exponent: float = config.IMBALANCE_EXPONENT
    distributions: List[Distribution] = ["balanced", "long-tail"]
    compare_mechanisms: bool = True

    grid_values: Optional[List[int]] = None
    grid_target: Literal["noise-toy", "imbalance"] = "imbalance"
    grid_metric: str = "delta_m"
    grid_workers: int = Field(1, ge=1)

    sweep_n_s: List[int] = config.SWEEP_N_S
    sweep_d: List[int] = config.SWEEP_D
    sweep_L: List[int] = config.SWEEP_L

    gradcheck_seeds: List[int] = config.GRADCHECK_SEEDS
    robustness_seeds: List[int] = config.ROBUSTNESS_SEEDS

    out_dir: Optional[str] = None
    plots: bool = True

    @field_validator("loss_weights", "grid_values", "distributions", "sweep_n_s", "sweep_d", "sweep_L",
                     "gradcheck_seeds", "robustness_seeds", mode="before")
    @classmethod
    def _split_lists(cls, value: Any) -> Any:
        if isinstance(value, str):
            value = [part.strip() for part in value.split(",") if part.strip()]
        return value

    @model_validator(mode="after")
    def _resolve(self) -> "ExperimentConfig":
        if self.kind == "seeds":
            target = "noise-toy"
        else:
            target = self.grid_target if self.kind in ("grid-L", "grid-K") else self.kind
        defaults = config.IMBALANCE_DEFAULTS if target == "imbalance" else config.NOISE_TOY_DEFAULTS
        for key, value in defaults.items():
            if getattr(self, key) is None:
                setattr(self, key, value)
        if self.kind == "grid-L" and self.grid_values is None:
            self.grid_values = list(config.GRID_L_VALUES)
        if self.kind == "grid-K" and self.grid_values is None:
            self.grid_values = list(config.GRID_K_VALUES)

        if self.mechanism == "skem" and self.etf_scale is None:
            raise ValueError("mechanism 'skem' requires etf settings (etf_scale)")
        if self.loss_weights is not None and any(w <= 0 for w in self.loss_weights):
            raise ValueError("loss weights must be strictly positive")
        if not self.distributions:
            raise ValueError("at least one distribution is required")
        return self

    @property
    def n_s(self) -> int:
        return self.n_tasks * self.m


class RunReport(BaseModel):
    run_id: str
    kind: ExperimentKind
    mechanism: Mechanism
    config: Dict[str, Any]
    config_hash: str
    design_notes: Dict[str, str]
    epoch_losses: Dict[str, List[float]] = {}
    final_metrics: Dict[str, float] = {}
    task_metrics: Dict[str, float] = {}
    noise_mass: Optional[float] = None
    wall_clock_seconds: float = 0.0
    artifacts: List[str] = []


class GridSummary(BaseModel):
    param: Literal["L", "top_k"]
    metric: str
    values: List[int]
    seeds: List[int]
    ranking: List[int]
    best_value: int
    reference_metrics: Dict[str, float]
    rows: List[Dict[str, Any]]
    csv_path: Optional[str] = None


class GradcheckSuiteReport(BaseModel):
    seeds: List[int]
    step: float
    rtol: float
    atol: float
    results: List[GradcheckResult]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> List[str]:
        return [r.name for r in self.results if not r.passed]
