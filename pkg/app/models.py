from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from app.config import SweepConfig
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class TrainMode(str, Enum):
    """Training schemes: the full method and its four baselines."""

    SUP = "sup"
    SUP_COV = "sup_cov"
    ENT_COV = "ent_cov"
    OURS_NO_COV = "ours_no_cov"
    OURS = "ours"

    @property
    def uses_sop(self) -> bool:
        return self in (TrainMode.SUP_COV, TrainMode.ENT_COV, TrainMode.OURS)

    @property
    def uses_unlabeled(self) -> bool:
        return self in (TrainMode.ENT_COV, TrainMode.OURS_NO_COV, TrainMode.OURS)

    @property
    def adversarial(self) -> bool:
        return self in (TrainMode.OURS_NO_COV, TrainMode.OURS)

    @property
    def normalized_classifier(self) -> bool:
        return self is not TrainMode.SUP


class PreNorm(str, Enum):
    TRACE = "trace"
    FROBENIUS = "frobenius"


class ParamGroup(str, Enum):
    """Partition of the trainable parameters into theta_F and theta_C."""

    FEATURE_EXTRACTOR = "feature_extractor"
    CLASSIFIER = "classifier"


class Split(str, Enum):
    LABELED = "labeled"
    UNLABELED = "unlabeled"
    VALIDATION = "validation"
    TEST = "test"


class SweepKind(str, Enum):
    LAMBDA = "lambda"
    LABEL_RATE = "label_rate"
    BATCH = "batch"
    MODES = "modes"


class LayerKind(str, Enum):
    CONV2D = "conv2d"
    RELU = "relu"
    POINTWISE_LINEAR = "pointwise_linear"


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class SyntheticSpec(StrictModel):
    num_classes: int = Field(10, ge=2)
    num_parts: int = Field(8, ge=4)
    height: int = Field(16, ge=2)
    width: int = Field(16, ge=2)
    channels: int = Field(8, ge=1)
    cooccurrence_radius: float = Field(2.0, gt=0)
    site_separation: float = Field(4.0, gt=0)
    edge_margin: float = Field(2.0, ge=0)
    blob_sigma: float = Field(1.0, gt=0)
    amplitude: float = Field(1.0, gt=0)
    amplitude_jitter: float = Field(0.2, ge=0, lt=1)
    pair_break_prob: float = Field(0.2, ge=0, le=1)
    noise_std: float = Field(0.1, ge=0)
    labeled_per_class: int = Field(20, ge=0)
    unlabeled_per_class: int = Field(200, ge=0)
    validation_per_class: int = Field(20, ge=0)
    test_per_class: int = Field(50, ge=0)
    seed: int = 0

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return self.channels, self.height, self.width


class LayerSpec(StrictModel):
    kind: LayerKind
    out_channels: Optional[int] = Field(None, ge=1)
    kernel_size: int = Field(3, ge=1)
    stride: int = Field(1, ge=1)
    padding: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _channels_for_linear_layers(self):
        if self.kind is not LayerKind.RELU and self.out_channels is None:
            raise ValueError(f"{self.kind.value} layer needs out_channels")
        return self


def _default_layers() -> List[LayerSpec]:
    return [
        LayerSpec(kind=LayerKind.CONV2D, out_channels=16, kernel_size=3, padding=1),
        LayerSpec(kind=LayerKind.RELU),
        LayerSpec(kind=LayerKind.POINTWISE_LINEAR, out_channels=8),
    ]


class FeatureExtractorConfig(StrictModel):
    layers: List[LayerSpec] = Field(default_factory=_default_layers)

    def output_shape(self, input_shape: Tuple[int, int, int]) -> Tuple[int, int, int]:
        """(d, h, w) produced for an input of shape (c, H, W)."""
        channels, height, width = input_shape
        for layer in self.layers:
            if layer.kind is LayerKind.CONV2D:
                height = (height + 2 * layer.padding - layer.kernel_size) // layer.stride + 1
                width = (width + 2 * layer.padding - layer.kernel_size) // layer.stride + 1
                channels = layer.out_channels
            elif layer.kind is LayerKind.POINTWISE_LINEAR:
                channels = layer.out_channels
        return channels, height, width


class ModelConfig(StrictModel):
    feature_extractor: FeatureExtractorConfig = Field(default_factory=FeatureExtractorConfig)
    eps_norm: float = Field(1e-8, gt=0)
    logit_scale: float = Field(1.0, gt=0)


class SopConfig(StrictModel):
    iterations: int = Field(5, ge=1)
    pre_norm: PreNorm = PreNorm.TRACE
    alpha: float = 0.5
    eps_trace: float = Field(1e-10, gt=0)

    @field_validator("alpha")
    @classmethod
    def _only_square_root(cls, value: float) -> float:
        if value != 0.5:
            raise ValueError("only the matrix square root (alpha = 0.5) is supported")
        return value


class TrainConfig(StrictModel):
    lambda_: float = Field(0.025, ge=0, alias="lambda")
    lr_feature: float = Field(0.0012, gt=0)
    lr_classifier: float = Field(0.003, gt=0)
    batch_labeled: int = Field(10, ge=1)
    batch_unlabeled: int = Field(10, ge=1)
    iterations: int = Field(2000, ge=1)
    seed: int = 0
    early_stop_patience: Optional[int] = Field(None, ge=1)
    eval_every: int = Field(100, ge=1)
    eval_batch_size: int = Field(100, ge=1)
    mode: TrainMode = TrainMode.OURS
    sequential_updates: bool = False
    momentum: float = Field(0.0, ge=0, lt=1)
    weight_decay: float = Field(0.0, ge=0)
    horizontal_flip: bool = False

    def lr_by_group(self) -> dict:
        return {
            ParamGroup.FEATURE_EXTRACTOR: self.lr_feature,
            ParamGroup.CLASSIFIER: self.lr_classifier,
        }


class SweepSpec(StrictModel):
    lambda_grid: List[float] = Field(default_factory=lambda: list(SweepConfig.LAMBDA_GRID))
    label_rates: List[float] = Field(default_factory=lambda: list(SweepConfig.LABEL_RATES))
    batch_grid: List[Tuple[int, int]] = Field(
        default_factory=lambda: list(SweepConfig.BATCH_GRID)
    )
    modes: List[TrainMode] = Field(default_factory=lambda: list(TrainMode))
    seeds: Optional[List[int]] = None


class RunConfig(StrictModel):
    """JSON run document: everything a command needs, echoed as resolved-config.json."""

    seed: Optional[int] = None
    output_dir: Optional[Path] = None
    data: SyntheticSpec = Field(default_factory=SyntheticSpec)
    model: ModelConfig = Field(default_factory=ModelConfig)
    sop: SopConfig = Field(default_factory=SopConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    sweep: SweepSpec = Field(default_factory=SweepSpec)

    @model_validator(mode="after")
    def _propagate_seed(self):
        # a top-level seed drives both the dataset and the training run
        if self.seed is not None:
            self.data.seed = self.seed
            self.train.seed = self.seed
        return self


class MetricsRecord(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    iteration: int
    labeled_loss: float = Field(alias="L")
    entropy: float = Field(alias="H")
    val_acc: Optional[float] = Field(None, ge=0, le=1)
    test_acc: Optional[float] = Field(None, ge=0, le=1)
    ms: float = 0.0

    def csv_row(self) -> dict:
        return self.model_dump(by_alias=True)


METRICS_COLUMNS = ["iteration", "L", "H", "val_acc", "test_acc", "ms"]


class LayerError(BaseModel):
    name: str
    group: ParamGroup
    max_rel_err: float
    mean_rel_err: float


class GradCheckReport(BaseModel):
    tolerance: float
    max_rel_err: float
    passed: bool
    layers: List[LayerError]


class AcceptanceCheck(BaseModel):
    name: str
    value: float
    threshold: float
    passed: bool


class AcceptanceReport(BaseModel):
    seeds: List[int]
    mode_means: Dict[str, float]
    checks: List[AcceptanceCheck]
    passed: bool
