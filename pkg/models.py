from dataclasses import dataclass, field

import torch

from errors import DataError

SPLITS = ("train", "test")
LABELS = ("good", "defect")
MAP_SOURCES = ("level_1", "level_2", "level_3", "fused")


@dataclass
class FeaturePyramid:
    levels: list[torch.Tensor]  # (N, C_l, H / 2**(l+1), W / 2**(l+1)) for l = 1..3

    def __len__(self) -> int:
        return len(self.levels)

    def __iter__(self):
        return iter(self.levels)

    def __getitem__(self, idx: int) -> torch.Tensor:
        return self.levels[idx]

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [tuple(level.shape) for level in self.levels]


@dataclass
class AnomalyMap:
    values: torch.Tensor  # (H, W), or (N, H, W) for a batch
    source: str = "fused"

    def __post_init__(self):
        if self.source not in MAP_SOURCES:
            raise ValueError(f"Unknown anomaly map source: {self.source}")

    def unbind(self) -> list["AnomalyMap"]:
        """Split a batched map into one map per image."""
        if self.values.dim() == 2:
            return [self]
        return [AnomalyMap(values=v, source=self.source) for v in self.values]


@dataclass
class DatasetRecord:
    image_path: str
    category: str
    split: str  # "train" or "test"
    label: str  # "good" or "defect"
    defect_type: str | None = None
    mask_path: str | None = None

    @property
    def is_defect(self) -> bool:
        return self.label == "defect"


@dataclass
class DatasetIndex:
    records: list[DatasetRecord]
    categories: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.categories:
            self.categories = sorted({r.category for r in self.records})
        for rec in self.records:
            if rec.split not in SPLITS or rec.label not in LABELS:
                raise DataError(f"Bad split/label on {rec.image_path}: {rec.split}/{rec.label}")
            if rec.split == "train" and rec.is_defect:
                raise DataError(f"Train split must be anomaly-free, found defect: {rec.image_path}")
            if rec.split == "test" and rec.is_defect and not rec.mask_path:
                raise DataError(f"Defect image has no ground-truth mask: {rec.image_path}")

    def class_id(self, category: str) -> int:
        return self.categories.index(category)

    def select(self, category: str | None = None, split: str | None = None,
               label: str | None = None) -> list[DatasetRecord]:
        return [
            r for r in self.records
            if (category is None or r.category == category)
            and (split is None or r.split == split)
            and (label is None or r.label == label)
        ]


@dataclass
class EpochRecord:
    phase: str  # "head_only", "all" or "distill"
    epoch: int
    loss: float
    accuracy: float | None = None


@dataclass
class CategoryResult:
    category: str
    image_auroc: float | None  # None when the metric is undefined for this category
    pixel_auroc: float | None
    n_images: int
    mean_defect_score: float | None = None


@dataclass
class EvalReport:
    per_category: list[CategoryResult]
    mean_image_auroc: float | None = None
    mean_pixel_auroc: float | None = None

    @classmethod
    def from_results(cls, per_category: list[CategoryResult]) -> "EvalReport":
        """Build a report whose means are unweighted averages of the defined per-category values."""
        image = [c.image_auroc for c in per_category if c.image_auroc is not None]
        pixel = [c.pixel_auroc for c in per_category if c.pixel_auroc is not None]
        return cls(
            per_category=per_category,
            mean_image_auroc=sum(image) / len(image) if image else None,
            mean_pixel_auroc=sum(pixel) / len(pixel) if pixel else None,
        )
