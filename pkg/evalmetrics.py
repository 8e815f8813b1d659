"""AUROC metrics and the per-category evaluation protocol.

AUROC is the Mann-Whitney probability that a random positive outranks a
random negative, ties counted one half. Pixel AUROC pools every pixel of a
category's test images into a single ranking.
"""

import logging

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.metrics import roc_auc_score

from backbone import Backbone, extract_pyramid
from config import DistanceWeights, RunConfig
from dataset import load_image, load_mask
from distill import distance_field
from errors import DataError, ShapeError, UndefinedMetricError
from models import AnomalyMap, CategoryResult, DatasetIndex, DatasetRecord, EvalReport
from scoring import score_batch

logger = logging.getLogger(__name__)


def auroc(scores, labels) -> float:
    """Area under the ROC curve with ties counted one half."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ShapeError(f"{scores.size} scores but {labels.size} labels")
    present = set(np.unique(labels).tolist())
    if not present <= {0, 1}:
        raise DataError(f"Labels must be 0 or 1, got {sorted(present)}")
    if len(present) < 2:
        raise UndefinedMetricError("AUROC needs at least one positive and one negative label")
    return float(roc_auc_score(labels, scores))


def _as_array(m) -> np.ndarray:
    if isinstance(m, AnomalyMap):
        m = m.values
    if isinstance(m, torch.Tensor):
        m = m.detach().cpu().numpy()
    return np.asarray(m)


def pixel_auroc(maps: list, masks: list) -> float:
    """AUROC over the concatenation of all pixels of all images."""
    if len(maps) != len(masks):
        raise ShapeError(f"{len(maps)} maps but {len(masks)} masks")
    flat_scores, flat_labels = [], []
    for i, (m, mask) in enumerate(zip(maps, masks)):
        m, mask = _as_array(m), _as_array(mask)
        if m.shape != mask.shape:
            raise ShapeError(f"Map {i} has shape {m.shape} but its mask has {mask.shape}")
        flat_scores.append(m.ravel())
        flat_labels.append((mask.ravel() > 0).astype(np.uint8))
    if not flat_scores:
        raise UndefinedMetricError("No pixels to rank")
    labels = np.concatenate(flat_labels)
    if not labels.any():
        raise UndefinedMetricError("No defect pixels in this category")
    return auroc(np.concatenate(flat_scores), labels)


def mean_defect_score(maps: list, masks: list) -> float | None:
    """Mean anomaly value over ground-truth defect pixels; None when there are none."""
    values = [_as_array(m)[_as_array(mask) > 0] for m, mask in zip(maps, masks)]
    values = [v for v in values if v.size]
    if not values:
        return None
    return float(np.concatenate(values).astype(np.float64).mean())


def _mask_for(record: DatasetRecord, size: int) -> np.ndarray:
    if not record.is_defect:
        return np.zeros((size, size), dtype=np.uint8)
    if not record.mask_path:
        raise DataError(f"Defect image has no ground-truth mask: {record.image_path}")
    return load_mask(record.mask_path, size)


def _guarded(metric, *args, category: str, name: str) -> float | None:
    try:
        return metric(*args)
    except UndefinedMetricError as e:
        logger.warning(f"[{category}] {name} AUROC undefined: {e}; excluded from the mean")
        return None


def _load_batch(records: list[DatasetRecord], size: int) -> torch.Tensor:
    return torch.stack([load_image(r.image_path, size) for r in records])


def score_category(
    teacher: Backbone, student: Backbone, records: list[DatasetRecord], cfg: RunConfig
) -> tuple[list[float], list[np.ndarray]]:
    """Image scores and fused maps for the given records, in order."""
    size = teacher.config.input_size
    scores, maps = [], []
    for start in range(0, len(records), cfg.eval.batch_size):
        chunk = records[start:start + cfg.eval.batch_size]
        fused, _, batch_scores = score_batch(teacher, student, _load_batch(chunk, size), cfg.scoring)
        maps.extend(m.values.numpy() for m in fused.unbind())
        scores.extend(float(s) for s in batch_scores)
    return scores, maps


def evaluate(teacher: Backbone, student: Backbone, index: DatasetIndex, cfg: RunConfig) -> EvalReport:
    """Image- and pixel-level AUROC per category, plus unweighted means."""
    size = teacher.config.input_size
    results = []
    for category in index.categories:
        records = index.select(category=category, split="test")
        if not records:
            logger.warning(f"[{category}] no test images; skipped")
            results.append(CategoryResult(category, None, None, 0))
            continue
        masks = [_mask_for(r, size) for r in records]
        scores, maps = score_category(teacher, student, records, cfg)
        labels = [int(r.is_defect) for r in records]

        result = CategoryResult(
            category=category,
            image_auroc=_guarded(auroc, scores, labels, category=category, name="image"),
            pixel_auroc=_guarded(pixel_auroc, maps, masks, category=category, name="pixel"),
            n_images=len(records),
            mean_defect_score=mean_defect_score(maps, masks),
        )
        results.append(result)
        logger.info(
            f"[{category}] images={result.n_images} image_auroc={_fmt(result.image_auroc)} "
            f"pixel_auroc={_fmt(result.pixel_auroc)}"
        )

    report = EvalReport.from_results(results)
    logger.info(
        f"Mean image AUROC {_fmt(report.mean_image_auroc)}, mean pixel AUROC {_fmt(report.mean_pixel_auroc)}"
    )
    return report


def _fmt(value: float | None) -> str:
    return "n/a" if value is None else f"{value:.4f}"


@torch.no_grad()
def feature_contrast(
    teacher: Backbone,
    index: DatasetIndex,
    weights: DistanceWeights | None = None,
    batch_size: int = 16,
) -> dict[str, float]:
    """Mean teacher-feature distance between defect positions and the clean category mean.

    For every category the clean reference is the mean teacher pyramid over its
    train images. Distances are taken at the pyramid positions a defect mask
    touches and averaged over levels. A teacher that separates defects better
    scores higher.
    """
    weights = weights or DistanceWeights()
    size = teacher.config.input_size
    teacher.eval()
    contrast = {}
    for category in index.categories:
        defects = index.select(category=category, split="test", label="defect")
        if not defects:
            continue
        train = index.select(category=category, split="train")
        if not train:
            logger.warning(f"[{category}] no train images for a clean reference; skipped")
            continue
        sums = None
        for start in range(0, len(train), batch_size):
            pyramid = extract_pyramid(teacher, _load_batch(train[start:start + batch_size], size))
            batch_sums = [level.sum(dim=0) for level in pyramid]
            sums = batch_sums if sums is None else [a + b for a, b in zip(sums, batch_sums)]
        reference = [s / len(train) for s in sums]

        per_level = [[] for _ in reference]
        for start in range(0, len(defects), batch_size):
            chunk = defects[start:start + batch_size]
            pyramid = extract_pyramid(teacher, _load_batch(chunk, size))
            masks = torch.from_numpy(np.stack([_mask_for(r, size) for r in chunk])).float().unsqueeze(1)
            for level_idx, (feats, ref) in enumerate(zip(pyramid, reference)):
                dist = distance_field(feats, ref.expand_as(feats), weights, dim=1)
                touched = F.adaptive_max_pool2d(masks, feats.shape[-2:]).squeeze(1) > 0
                per_level[level_idx].append(dist[touched])
        level_means = [torch.cat(v).double().mean().item() for v in per_level if torch.cat(v).numel()]
        if not level_means:
            logger.warning(f"[{category}] defect masks touch no feature positions; skipped")
            continue
        contrast[category] = float(np.mean(level_means))
        logger.info(f"[{category}] teacher feature contrast {contrast[category]:.4f}")
    return contrast


def intensity_baseline(index: DatasetIndex, size: int) -> dict[str, float]:
    """Pixel AUROC of |image - mean train image| averaged over channels, per category."""
    results = {}
    for category in index.categories:
        train = index.select(category=category, split="train")
        if not train:
            logger.warning(f"[{category}] no train images for a mean image; skipped")
            continue
        mean_image = torch.stack([load_image(r.image_path, size) for r in train]).mean(dim=0)
        records = index.select(category=category, split="test")
        maps = [(load_image(r.image_path, size) - mean_image).abs().mean(dim=0).numpy() for r in records]
        masks = [_mask_for(r, size) for r in records]
        auc = _guarded(pixel_auroc, maps, masks, category=category, name="baseline pixel")
        if auc is not None:
            results[category] = auc
    return results
