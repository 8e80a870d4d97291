"""Pydantic models for the lab's data structures."""

from typing import Annotated, Literal, Optional

import numpy as np
from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, field_validator, model_validator

import config


OutputSpace = Literal["logits", "probs"]
LossKind = Literal["euclidean", "ce", "combined"]
SamplerName = Literal["cod", "emaod", "random", "entropy", "least_conf", "margin_conf", "ratio_conf"]
SelectionMethod = Literal["tod", "train_loss", "entropy", "least_conf", "margin_conf", "ratio_conf"]

SAMPLERS: tuple[str, ...] = ("cod", "emaod", "random", "entropy", "least_conf", "margin_conf", "ratio_conf")
SELECTION_METHODS: tuple[str, ...] = ("tod", "train_loss", "entropy", "least_conf", "margin_conf", "ratio_conf")


def _frozen_array(values, dtype=np.float64) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


def _finite_params(values) -> np.ndarray:
    arr = _frozen_array(values)
    if not np.all(np.isfinite(arr)):
        raise ValueError("parameter vector contains NaN or inf")
    return arr


# Flat float64 parameter vector: layer-major, weights row-major (in x out), then biases
ParamVector = Annotated[np.ndarray, BeforeValidator(_finite_params)]


class MLPSpec(BaseModel):
    """Architecture of a fully connected ReLU network with raw (linear) outputs."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    layer_sizes: tuple[int, ...]
    activation: Literal["relu"] = "relu"

    @field_validator("layer_sizes")
    @classmethod
    def _check_sizes(cls, sizes: tuple[int, ...]) -> tuple[int, ...]:
        if len(sizes) < 2:
            raise ValueError("need at least an input and an output size")
        if any(s < 1 for s in sizes):
            raise ValueError(f"layer sizes must be positive, got {list(sizes)}")
        return sizes

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        return list(zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    @property
    def n_params(self) -> int:
        return sum(n_in * n_out + n_out for n_in, n_out in self.layer_shapes)


class TrainConfig(BaseModel):
    """SGD hyperparameters for one training run."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    lr: float = Field(default=config.DEFAULT_LR, gt=0)
    momentum: float = Field(default=config.DEFAULT_MOMENTUM, ge=0, lt=1)
    weight_decay: float = Field(default=config.DEFAULT_WEIGHT_DECAY, ge=0)
    batch_size: int = Field(default=config.DEFAULT_BATCH_SIZE, gt=0)
    epochs: int = Field(default=config.DEFAULT_EPOCHS, gt=0)
    lr_drop_factor: float = Field(default=config.DEFAULT_LR_DROP_FACTOR, gt=0, le=1)
    lr_drop_at_frac: float = Field(default=config.DEFAULT_LR_DROP_AT_FRAC, gt=0, le=1)

    def lr_at_epoch(self, epoch: int) -> float:
        """Single multiplicative drop once `lr_drop_at_frac` of the epochs have passed."""
        drop_epoch = int(round(self.lr_drop_at_frac * self.epochs))
        if self.lr_drop_at_frac < 1 and epoch >= drop_epoch:
            return self.lr * self.lr_drop_factor
        return self.lr


class OptimState(BaseModel):
    """Parameters plus momentum buffer, owned by exactly one training run."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    params: np.ndarray
    momentum_buffer: np.ndarray
    step_count: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check_shapes(self) -> "OptimState":
        if self.params.shape != self.momentum_buffer.shape:
            raise ValueError(
                f"momentum buffer shape {self.momentum_buffer.shape} != params shape {self.params.shape}"
            )
        return self

    @classmethod
    def fresh(cls, params: np.ndarray) -> "OptimState":
        params = np.asarray(params, dtype=np.float64)
        return cls(params=params.copy(), momentum_buffer=np.zeros_like(params))


class Snapshot(BaseModel):
    """A parameter vector tagged with where in training it was taken."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    params: ParamVector
    cycle: int = Field(ge=0)
    epoch: int = Field(ge=0)
    step: int = Field(ge=0)


class Trajectory(BaseModel):
    """Plain-GD run on one probe sample, recorded at every step."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    spec: MLPSpec
    x: np.ndarray
    y: float
    eta: float = Field(gt=0)
    snapshots: list[Snapshot]
    outputs: list[float]     # f(x; w_tau)
    losses: list[float]      # L_tau(x) = 1/2 (y - f)^2
    grad_sq: list[float]     # ||grad_w f(x; w_tau)||^2

    @model_validator(mode="after")
    def _check_consistency(self) -> "Trajectory":
        n = len(self.snapshots)
        if not (len(self.outputs) == len(self.losses) == len(self.grad_sq) == n):
            raise ValueError("per-step records must have one entry per snapshot")
        steps = [s.step for s in self.snapshots]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("snapshot steps must be strictly increasing")
        if any(loss < 0 for loss in self.losses):
            raise ValueError("losses must be nonnegative")
        return self

    @property
    def steps(self) -> list[int]:
        return [s.step for s in self.snapshots]

    @property
    def grad_norms(self) -> list[float]:
        return [float(np.sqrt(g)) for g in self.grad_sq]


class BoundReport(BaseModel):
    """One evaluation of an inequality: lhs <= rhs (up to slack)."""
    check: str
    trial: int = 0
    lhs: float = Field(ge=0)
    rhs: float = Field(ge=0)
    ratio: float
    eta: float
    T: int
    slack: float
    satisfied_with_slack: bool
    rhs_unsquared: Optional[float] = None  # body form with ||grad f|| unsquared, reported only


class LipschitzReport(BaseModel):
    """ReLU-layer Lipschitz inequality; exact, no slack."""
    trial: int = 0
    lhs: float
    rhs: float
    satisfied: bool


class GradStats(BaseModel):
    """Summary of ||grad_w f||^2 over samples x snapshots."""
    mean: float
    std: float
    max: float
    count: int


class EstimationQuality(BaseModel):
    """How well a label-free score orders samples by their true loss."""
    spearman_rho: Optional[float]
    decile_mean_losses: list[float]
    recall_at_p: dict[int, float]


class ALConfig(BaseModel):
    """Active learning schedule, sampler and semisupervised settings."""
    model_config = ConfigDict(frozen=True, extra="forbid", populate_by_name=True)

    start_frac: float = Field(default=config.DEFAULT_START_FRAC, gt=0, lt=1)
    budget_frac: float = Field(default=config.DEFAULT_BUDGET_FRAC, gt=0, lt=1)
    cycles: int = Field(default=config.DEFAULT_CYCLES, gt=0)
    sampler: SamplerName = "cod"
    semi_enabled: bool = True
    lam: float = Field(default=config.DEFAULT_LAMBDA, ge=0, alias="lambda")
    alpha: float = Field(default=config.DEFAULT_ALPHA, ge=0, lt=1)
    unlabeled_batch_size: Optional[int] = Field(default=None, gt=0)
    output_space: OutputSpace = "probs"
    unsup_baseline: Literal["ema", "cyclic"] = "ema"
    cod_gap_epochs: Optional[int] = Field(default=None, gt=0)
    warm_start: bool = False
    # cycle 1 COD baseline: a model fit to the initial pool, or the random init
    first_cycle_baseline: Literal["trained", "init"] = "trained"
    ema_warmup: bool = True

    @model_validator(mode="after")
    def _check_schedule(self) -> "ALConfig":
        if self.start_frac + self.cycles * self.budget_frac > 1 + 1e-9:
            raise ValueError(
                f"schedule infeasible: start_frac + cycles * budget_frac = "
                f"{self.start_frac + self.cycles * self.budget_frac:.4f} > 1"
            )
        return self


class PoolState(BaseModel):
    """Labeled / unlabeled partition of the training indices."""
    model_config = ConfigDict(frozen=True)

    labeled: tuple[int, ...]
    unlabeled: tuple[int, ...]
    cycle: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check_partition(self) -> "PoolState":
        if set(self.labeled) & set(self.unlabeled):
            raise ValueError("labeled and unlabeled pools overlap")
        return self

    @property
    def n_total(self) -> int:
        return len(self.labeled) + len(self.unlabeled)


class CycleRecord(BaseModel):
    """Metrics of one active learning cycle."""
    seed: int
    cycle: int
    sampler: str
    semi: bool
    labeled_frac: float
    n_labeled: int
    test_acc: float = Field(ge=0, le=1)
    per_class_acc: list[Optional[float]]
    mean_train_loss: float
    mean_cod: Optional[float] = None
    mean_true_loss: Optional[float] = None
    mean_grad_sq: float
    spearman_cod_loss: Optional[float] = None
    decile_mean_losses: Optional[list[float]] = None
    recall_at_p: Optional[dict[int, float]] = None
    seconds: float = 0.0
    acquisition_seconds: float = 0.0


class CandidateModel(BaseModel):
    """A trained model plus the checkpoint taken a fixed interval before its end."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    id: int
    params: ParamVector
    baseline: ParamVector
    final_train_loss: float = Field(ge=0)
    seed: int = 0
    epochs: int = 0
    gap_steps: int = 0

    @model_validator(mode="after")
    def _check_shapes(self) -> "CandidateModel":
        if self.params.shape != self.baseline.shape:
            raise ValueError("baseline and params must share a shape")
        return self


class CandidatePool(BaseModel):
    """Candidates plus held-out truth; selectors only ever see `candidates`."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    candidates: list[CandidateModel]
    true_test_acc: dict[int, float]

    @property
    def best_id(self) -> int:
        # ties go to the smaller id
        return min(self.best_ids)

    @property
    def best_ids(self) -> tuple[int, ...]:
        """Every candidate sharing the top test accuracy."""
        top = max(self.true_test_acc.values())
        return tuple(sorted(i for i, acc in self.true_test_acc.items() if acc == top))


class RankingResult(BaseModel):
    """Candidate ids sorted by ascending criterion (lower = predicted better)."""
    method: str
    order: list[int]
    values: dict[int, float]

    @model_validator(mode="after")
    def _check_permutation(self) -> "RankingResult":
        if sorted(self.order) != sorted(self.values):
            raise ValueError("order must be a permutation of the candidate ids")
        return self


class Dataset(BaseModel):
    """Feature matrix, integer labels and per-sample train/test tags."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    features: np.ndarray
    labels: np.ndarray
    n_classes: int = Field(ge=2)
    split: np.ndarray
    name: str
    provenance: dict = Field(default_factory=dict)

    @field_validator("features", mode="before")
    @classmethod
    def _freeze_features(cls, values) -> np.ndarray:
        return _frozen_array(values)

    @field_validator("labels", mode="before")
    @classmethod
    def _freeze_labels(cls, values) -> np.ndarray:
        return _frozen_array(values, dtype=np.int64)

    @field_validator("split", mode="before")
    @classmethod
    def _freeze_split(cls, values) -> np.ndarray:
        return _frozen_array(values, dtype="<U5")

    @model_validator(mode="after")
    def _check_dataset(self) -> "Dataset":
        n = self.features.shape[0]
        if self.features.ndim != 2:
            raise ValueError("features must be an n x d matrix")
        if self.labels.shape != (n,) or self.split.shape != (n,):
            raise ValueError("labels and split need one entry per row")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain missing or non-finite values")
        if np.any(self.labels < 0) or np.any(self.labels >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        unknown = set(np.unique(self.split)) - {"train", "test"}
        if unknown:
            raise ValueError(f"unknown split tags: {sorted(unknown)}")
        missing = set(range(self.n_classes)) - set(self.labels[self.split == "train"].tolist())
        if missing:
            raise ValueError(f"classes missing from the train split: {sorted(missing)}")
        return self

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def train_idx(self) -> np.ndarray:
        return np.flatnonzero(self.split == "train")

    @property
    def test_idx(self) -> np.ndarray:
        return np.flatnonzero(self.split == "test")

    @property
    def X_train(self) -> np.ndarray:
        return self.features[self.train_idx]

    @property
    def y_train(self) -> np.ndarray:
        return self.labels[self.train_idx]

    @property
    def X_test(self) -> np.ndarray:
        return self.features[self.test_idx]

    @property
    def y_test(self) -> np.ndarray:
        return self.labels[self.test_idx]

    def metadata(self) -> dict:
        """JSON-ready sidecar content."""
        return {"name": self.name, "n_classes": self.n_classes, "provenance": self.provenance}


# --- Experiment configuration -------------------------------------------------


class DatasetConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["two_moons", "blobs", "csv"] = "two_moons"
    n: int = Field(default=1000, ge=20)
    noise_sigma: float = Field(default=0.2, ge=0)
    n_classes: int = Field(default=5, ge=2)
    dim: int = Field(default=2, ge=2)
    centers_scale: float = Field(default=5.0, gt=0)
    sigma: float = Field(default=1.0, ge=0)
    test_frac: float = Field(default=0.2, gt=0, lt=1)
    seed: int = 0
    path: Optional[str] = None
    label_column: str = "label"
    split_column: Optional[str] = None
    normalize: bool = True

    @model_validator(mode="after")
    def _check_csv(self) -> "DatasetConfig":
        if self.kind == "csv" and not self.path:
            raise ValueError("dataset.path is required when kind is 'csv'")
        return self


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    layer_sizes: Optional[list[int]] = None
    hidden: list[int] = Field(default_factory=lambda: [32, 32])


class NoiseConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    p: float = Field(default=0.0, ge=0, le=1)


class SelectionConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    pool_size: int = Field(default=config.DEFAULT_POOL_SIZE, ge=2)
    gap_epochs: Optional[int] = Field(default=config.DEFAULT_GAP_EPOCHS, ge=0)
    gap_steps: Optional[int] = Field(default=None, ge=0)
    # candidates train at a fixed learning rate, skipping the late drop
    constant_lr: bool = True
    min_epochs: int = Field(default=5, gt=0)
    max_epochs: int = Field(default=50, gt=0)
    draws: int = Field(default=20, gt=0)
    topk: list[int] = Field(default_factory=lambda: list(config.DEFAULT_TOPK), min_length=1)
    methods: list[SelectionMethod] = Field(default_factory=lambda: list(SELECTION_METHODS))

    @model_validator(mode="after")
    def _check_selection(self) -> "SelectionConfig":
        if self.min_epochs > self.max_epochs:
            raise ValueError("min_epochs must not exceed max_epochs")
        if any(k < 1 or k > self.pool_size for k in self.topk):
            raise ValueError(f"every k in topk must lie in [1, pool_size={self.pool_size}]")
        return self


class OutputConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    record_timing: bool = False
    save_checkpoints: bool = True


class ExperimentConfig(BaseModel):
    """Top-level JSON experiment document; unknown keys are rejected."""
    model_config = ConfigDict(extra="forbid")

    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    active: ALConfig = Field(default_factory=ALConfig)
    noise: NoiseConfig = Field(default_factory=NoiseConfig)
    selection: SelectionConfig = Field(default_factory=SelectionConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)
    seeds: list[int] = Field(default_factory=lambda: [0], min_length=1)
    output_dir: Optional[str] = None
    jobs: int = Field(default=1, ge=1)


class RunStatus(BaseModel):
    """Written next to every command's outputs; holds no timestamps."""
    command: str
    status: Literal["ok", "partial", "failed"]
    files: list[str] = Field(default_factory=list)
    failures: list[str] = Field(default_factory=list)
