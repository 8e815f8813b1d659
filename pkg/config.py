"""Run configuration loaded from a JSON document. Single source of truth for all knobs."""

import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field

from errors import ConfigError

logger = logging.getLogger(__name__)

TOOL_VERSION = "1.0.0"

_dir = os.path.dirname(__file__)
EXAMPLE_CONFIG_PATH = os.path.join(_dir, "run_config.example.json")

TEXTURE_KINDS = ("grating", "checker", "noise")
FUSION_MODES = ("product", "sum")
IMAGE_SCORE_STATS = ("max", "top_k_mean")


@dataclass
class BackboneConfig:
    input_size: int = 256
    stem_channels: int = 64
    block_channels: list[int] = field(default_factory=lambda: [64, 128, 256])
    blocks_per_stage: int = 2
    num_classes: int = 15  # 0 builds a pure extractor without a head
    depth_scale: float = 1.0
    include_stage4_for_finetune: bool = False

    def __post_init__(self):
        self.block_channels = list(self.block_channels)
        self.validate()

    def validate(self) -> None:
        if len(self.block_channels) != 3:
            raise ConfigError(
                f"backbone.block_channels needs exactly 3 entries, got {len(self.block_channels)}"
            )
        if self.input_size <= 0 or self.input_size % 16:
            raise ConfigError(f"backbone.input_size must be a positive multiple of 16, got {self.input_size}")
        if self.depth_scale <= 0:
            raise ConfigError(f"backbone.depth_scale must be positive, got {self.depth_scale}")
        if self.blocks_per_stage < 1:
            raise ConfigError(f"backbone.blocks_per_stage must be >= 1, got {self.blocks_per_stage}")
        if self.num_classes == 1 or self.num_classes < 0:
            raise ConfigError(f"backbone.num_classes must be 0 or >= 2, got {self.num_classes}")
        for name, width in [("stem_channels", self.stem_channels)] + [
            (f"block_channels[{i}]", c) for i, c in enumerate(self.block_channels)
        ]:
            if self.scaled(width) < 1:
                raise ConfigError(
                    f"backbone.{name}={width} scales to zero channels at depth_scale {self.depth_scale}"
                )

    def scaled(self, channels: int) -> int:
        return int(round(channels * self.depth_scale))

    @property
    def stem_width(self) -> int:
        return self.scaled(self.stem_channels)

    @property
    def stage_widths(self) -> list[int]:
        return [self.scaled(c) for c in self.block_channels]

    @property
    def head_in_features(self) -> int:
        widths = self.stage_widths
        return 2 * widths[2] if self.include_stage4_for_finetune else widths[2]


@dataclass
class FinetuneConfig:
    head_warmup_epochs: int = 1
    full_epochs: int = 2
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 32
    seed: int = 0
    abnormal_fraction: float = 0.5

    def __post_init__(self):
        if self.head_warmup_epochs < 0 or self.full_epochs < 0:
            raise ConfigError("finetune epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError(f"finetune.batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("finetune optimizer settings out of range")
        if not 0.0 <= self.abnormal_fraction <= 1.0:
            raise ConfigError(f"finetune.abnormal_fraction must lie in [0, 1], got {self.abnormal_fraction}")


@dataclass
class DistanceWeights:
    lambda_l1: float = 1.0
    lambda_cos: float = 1.0

    def __post_init__(self):
        if self.lambda_l1 < 0 or self.lambda_cos < 0:
            raise ConfigError("distance weights must be >= 0")
        if self.lambda_l1 + self.lambda_cos <= 0:
            raise ConfigError("at least one distance weight must be positive")


@dataclass
class TrainConfig:
    """Distillation optimizer and loss settings."""

    learning_rate: float = 0.4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 100
    distance_weights: DistanceWeights = field(default_factory=DistanceWeights)
    seed: int = 1
    student_batch_stats: bool = True

    def __post_init__(self):
        if isinstance(self.distance_weights, dict):
            self.distance_weights = DistanceWeights(**self.distance_weights)
        if self.learning_rate <= 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("distill optimizer settings out of range")
        if self.batch_size < 1:
            raise ConfigError(f"distill.batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"distill.epochs must be >= 0, got {self.epochs}")


@dataclass
class ScoringConfig:
    fusion: str = "product"
    image_score: str = "max"
    top_k: int = 10
    distance_weights: DistanceWeights = field(default_factory=DistanceWeights)

    def __post_init__(self):
        if isinstance(self.distance_weights, dict):
            self.distance_weights = DistanceWeights(**self.distance_weights)
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"scoring.fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if self.image_score not in IMAGE_SCORE_STATS:
            raise ConfigError(
                f"scoring.image_score must be one of {IMAGE_SCORE_STATS}, got {self.image_score!r}"
            )
        if self.top_k < 1:
            raise ConfigError(f"scoring.top_k must be >= 1, got {self.top_k}")


@dataclass
class SynthConfig:
    categories: int = 3
    image_size: int = 64
    train_good_per_cat: int = 60
    test_good_per_cat: int = 10
    test_defect_per_cat: int = 10
    defect_area_fraction: tuple[float, float] = (0.01, 0.06)
    texture_kinds: list[str] | None = None  # None cycles through TEXTURE_KINDS
    seed: int = 7

    def __post_init__(self):
        self.defect_area_fraction = tuple(self.defect_area_fraction)
        counts = (self.categories, self.train_good_per_cat, self.test_good_per_cat, self.test_defect_per_cat)
        if any(c < 1 for c in counts):
            raise ConfigError("synth counts must all be >= 1")
        if self.image_size < 16:
            raise ConfigError(f"synth.image_size must be >= 16, got {self.image_size}")
        if len(self.defect_area_fraction) != 2:
            raise ConfigError("synth.defect_area_fraction needs [low, high]")
        lo, hi = self.defect_area_fraction
        if not 0 < lo <= hi <= 0.25:
            raise ConfigError(f"synth.defect_area_fraction must satisfy 0 < low <= high <= 0.25, got {lo}, {hi}")
        if self.texture_kinds is not None:
            if len(self.texture_kinds) != self.categories:
                raise ConfigError("synth.texture_kinds needs one entry per category")
            bad = [k for k in self.texture_kinds if k not in TEXTURE_KINDS]
            if bad:
                raise ConfigError(f"unknown texture kind {bad[0]!r}; choose from {TEXTURE_KINDS}")

    def kinds(self) -> list[str]:
        if self.texture_kinds is not None:
            return list(self.texture_kinds)
        return [TEXTURE_KINDS[i % len(TEXTURE_KINDS)] for i in range(self.categories)]


@dataclass
class DataConfig:
    root: str | None = None
    synth: SynthConfig = field(default_factory=SynthConfig)


@dataclass
class EvalConfig:
    batch_size: int = 8
    include_timing: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"eval.batch_size must be >= 1, got {self.batch_size}")


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    distill: TrainConfig = field(default_factory=TrainConfig)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        return _jsonable(dataclasses.asdict(self))


# Fields holding a nested section, keyed by (owner class, field name).
_NESTED = {
    (RunConfig, "backbone"): BackboneConfig,
    (RunConfig, "finetune"): FinetuneConfig,
    (RunConfig, "distill"): TrainConfig,
    (RunConfig, "scoring"): ScoringConfig,
    (RunConfig, "data"): DataConfig,
    (RunConfig, "eval"): EvalConfig,
    (TrainConfig, "distance_weights"): DistanceWeights,
    (ScoringConfig, "distance_weights"): DistanceWeights,
    (DataConfig, "synth"): SynthConfig,
}


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def _from_dict(cls, data, prefix: str):
    """Build ``cls`` from a dict, rejecting keys the dataclass does not declare."""
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'} must be a JSON object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        dotted = f"{prefix}.{unknown[0]}" if prefix else unknown[0]
        raise ConfigError(f"Unknown config key: {dotted}")

    kwargs = {}
    for name, value in data.items():
        dotted = f"{prefix}.{name}" if prefix else name
        nested = _NESTED.get((cls, name))
        kwargs[name] = _from_dict(nested, value, dotted) if nested else value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"Invalid value in {prefix or 'config'}: {e}") from e


def parse_run_config(data: dict) -> RunConfig:
    """Validate an already-decoded config document."""
    return _from_dict(RunConfig, data, "")


def load_run_config(path: str | None = None) -> RunConfig:
    """Load a RunConfig from ``path``; ``None`` yields all defaults."""
    if path is None:
        return RunConfig()
    try:
        with open(path) as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"Config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e
    cfg = parse_run_config(data)
    logger.debug(f"Loaded run config from {path}")
    return cfg
