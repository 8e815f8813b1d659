"""Teacher/student discrepancy maps, their fusion, and image-level scores."""

import logging

import torch
import torch.nn.functional as F

from backbone import Backbone, extract_pyramid
from config import DistanceWeights, ScoringConfig
from distill import distance_field
from errors import ShapeError, UnsupportedOperationError
from models import AnomalyMap

logger = logging.getLogger(__name__)


def level_anomaly_map(ft_l: torch.Tensor, fs_l: torch.Tensor, w: DistanceWeights | None = None) -> torch.Tensor:
    """(N, C, h, w) feature pair -> (N, h, w) per-position distances."""
    if ft_l.shape != fs_l.shape:
        raise ShapeError(f"Level shapes differ: {tuple(ft_l.shape)} vs {tuple(fs_l.shape)}")
    if ft_l.dim() != 4:
        raise ShapeError(f"Expected (N, C, h, w) features, got {tuple(ft_l.shape)}")
    return distance_field(ft_l, fs_l, w or DistanceWeights(), dim=1)


def upsample_bilinear(m: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Bilinear resize with half-pixel centers and edge clamping.

    Accepts (h, w) or (N, h, w) and returns the same rank.
    """
    if m.dim() not in (2, 3):
        raise ShapeError(f"Expected a (h, w) or (N, h, w) map, got {tuple(m.shape)}")
    h, w = m.shape[-2:]
    if height < h or width < w:
        raise UnsupportedOperationError(f"Downscaling {h}x{w} -> {height}x{width} is not supported")
    batched = m if m.dim() == 3 else m.unsqueeze(0)
    out = F.interpolate(batched.unsqueeze(1), size=(height, width), mode="bilinear", align_corners=False)
    out = out.squeeze(1)
    return out if m.dim() == 3 else out[0]


def fuse_maps(maps: list[torch.Tensor], mode: str = "product") -> AnomalyMap:
    """Elementwise product (or sum) of equally shaped level maps."""
    if not maps:
        raise ShapeError("Nothing to fuse")
    shape = maps[0].shape
    for m in maps[1:]:
        if m.shape != shape:
            raise ShapeError(f"Cannot fuse maps of shapes {tuple(shape)} and {tuple(m.shape)}")
    if mode == "product":
        fused = torch.stack(maps).prod(dim=0)
    elif mode == "sum":
        fused = torch.stack(maps).sum(dim=0)
    else:
        raise UnsupportedOperationError(f"Unknown fusion mode {mode!r}")
    return AnomalyMap(values=fused, source="fused")


def image_score(m: AnomalyMap, statistic: str = "max", top_k: int = 10) -> torch.Tensor:
    """Max pixel (or mean of the top-k pixels); one score per image."""
    values = m.values
    flat = values.reshape(-1) if values.dim() == 2 else values.reshape(values.shape[0], -1)
    if statistic == "max":
        return flat.max(dim=-1).values
    if statistic == "top_k_mean":
        k = min(top_k, flat.shape[-1])
        return flat.topk(k, dim=-1).values.mean(dim=-1)
    raise UnsupportedOperationError(f"Unknown image score statistic {statistic!r}")


@torch.no_grad()
def score_batch(
    teacher: Backbone,
    student: Backbone,
    images: torch.Tensor,
    cfg: ScoringConfig | None = None,
) -> tuple[AnomalyMap, list[AnomalyMap], torch.Tensor]:
    """Full scoring pipeline for a batch.

    Returns the fused map (N, H, W), the three upsampled level maps and the
    (N,) image scores.
    """
    cfg = cfg or ScoringConfig()
    teacher.eval()
    student.eval()
    pt = extract_pyramid(teacher, images)
    ps = extract_pyramid(student, images)
    height, width = images.shape[-2:]
    level_maps = [
        upsample_bilinear(level_anomaly_map(ft, fs, cfg.distance_weights), height, width)
        for ft, fs in zip(pt, ps)
    ]
    fused = fuse_maps(level_maps, cfg.fusion)
    scores = image_score(fused, cfg.image_score, cfg.top_k)
    levels = [AnomalyMap(values=m, source=f"level_{i}") for i, m in enumerate(level_maps, start=1)]
    return fused, levels, scores
