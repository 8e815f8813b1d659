"""Distill the (enhanced) teacher's feature pyramid into a randomly initialized student.

The per-position distance combines a cosine term and a channel-averaged L1
term. The same definition drives the training loss and the anomaly maps.
"""

import logging
import math
from dataclasses import dataclass, field

import torch
from torch.utils.data import DataLoader, Dataset

from backbone import Backbone, build_backbone, check_batch_norm_batches, extract_pyramid
from config import DistanceWeights, TrainConfig
from errors import DataError, NumericError, ShapeError
from models import EpochRecord, FeaturePyramid

logger = logging.getLogger(__name__)

EPS = 1e-8


@dataclass
class DistillState:
    teacher: Backbone
    student: Backbone
    history: list[float] = field(default_factory=list)  # one loss per optimizer step
    epochs: list[EpochRecord] = field(default_factory=list)


def normalize_position(f: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """f / max(||f||_2, eps) along ``dim``."""
    norm = torch.linalg.vector_norm(f, ord=2, dim=dim, keepdim=True)
    return f / norm.clamp_min(EPS)


def distance_field(ft: torch.Tensor, fs: torch.Tensor, w: DistanceWeights, dim: int = 1) -> torch.Tensor:
    """Per-position distance with the channel axis at ``dim`` reduced away.

    The cosine term is 0.5 * ||ft_hat - fs_hat||^2, which equals 1 - cos for
    nonzero vectors and is exactly zero when both sides are bitwise equal.
    When exactly one side is a zero vector the term is 1.
    """
    if ft.shape != fs.shape:
        raise ShapeError(f"Feature shapes differ: {tuple(ft.shape)} vs {tuple(fs.shape)}")
    if ft.dim() == 0 or ft.shape[dim] < 1:
        raise ShapeError("Feature vectors need at least one channel")
    out = torch.zeros((), dtype=ft.dtype, device=ft.device)
    if w.lambda_cos:
        nt, ns = normalize_position(ft, dim), normalize_position(fs, dim)
        cos_term = 0.5 * (nt - ns).pow(2).sum(dim=dim)
        t_zero = torch.linalg.vector_norm(ft, ord=2, dim=dim) < EPS
        s_zero = torch.linalg.vector_norm(fs, ord=2, dim=dim) < EPS
        # exactly one side zero: lift the term to 1
        missing = 0.5 * (1 - nt.pow(2).sum(dim=dim)) + 0.5 * (1 - ns.pow(2).sum(dim=dim))
        cos_term = torch.where(t_zero ^ s_zero, cos_term + missing, cos_term)
        out = out + w.lambda_cos * cos_term
    if w.lambda_l1:
        out = out + w.lambda_l1 * (ft - fs).abs().mean(dim=dim)
    return out


def position_distance(ft: torch.Tensor, fs: torch.Tensor, w: DistanceWeights | None = None) -> torch.Tensor:
    """Distance between two C-vectors."""
    w = w or DistanceWeights()
    if ft.dim() != 1 or fs.dim() != 1:
        raise ShapeError(f"Expected C-vectors, got {tuple(ft.shape)} and {tuple(fs.shape)}")
    return distance_field(ft, fs, w, dim=0)


def distill_loss(pt: FeaturePyramid, ps: FeaturePyramid, w: DistanceWeights | None = None) -> torch.Tensor:
    """Mean over levels of the mean per-position distance."""
    w = w or DistanceWeights()
    if len(pt) != len(ps):
        raise ShapeError(f"Pyramids have {len(pt)} and {len(ps)} levels")
    level_losses = []
    for level, (ft, fs) in enumerate(zip(pt, ps), start=1):
        if ft.shape != fs.shape:
            raise ShapeError(f"Level {level} shapes differ: {tuple(ft.shape)} vs {tuple(fs.shape)}")
        level_losses.append(distance_field(ft, fs, w, dim=1).mean())
    return torch.stack(level_losses).mean()


def freeze_teacher(teacher: Backbone) -> Backbone:
    """Fix the teacher as a function: no gradients, running normalization statistics."""
    teacher.requires_grad_(False)
    teacher.eval()
    return teacher


def train_student(
    teacher: Backbone,
    ds_normal: Dataset,
    cfg: TrainConfig,
    student: Backbone | None = None,
) -> DistillState:
    """SGD on distill_loss over anomaly-free images; the teacher is never updated.

    ``student`` defaults to a fresh backbone with the teacher's config seeded
    by ``cfg.seed``.
    """
    if len(ds_normal) == 0:
        raise DataError("Distillation needs at least one anomaly-free image")
    freeze_teacher(teacher)
    if student is None:
        student = build_backbone(teacher.config, cfg.seed)
    if student.config != teacher.config:
        raise ShapeError("Teacher and student must share one backbone config")
    student.requires_grad_(True)

    state = DistillState(teacher=teacher, student=student)
    if cfg.epochs == 0:
        logger.info("distill.epochs is 0; student keeps its initialization")
        return state

    if cfg.student_batch_stats:
        check_batch_norm_batches(student, len(ds_normal), cfg.batch_size)

    optimizer = torch.optim.SGD(
        student.parameters(),
        lr=cfg.learning_rate,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
    )
    loader = DataLoader(
        ds_normal,
        batch_size=cfg.batch_size,
        shuffle=True,
        drop_last=False,
        generator=torch.Generator().manual_seed(cfg.seed),
    )

    step = 0
    for epoch in range(1, cfg.epochs + 1):
        # Student normalization follows the teacher unless batch statistics are requested.
        student.train(cfg.student_batch_stats)
        epoch_losses = []
        for images, _ in loader:
            with torch.no_grad():
                pt = extract_pyramid(teacher, images)
            ps = extract_pyramid(student, images)
            loss = distill_loss(pt, ps, cfg.distance_weights)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"Distillation loss became {value}", step)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            state.history.append(value)
            epoch_losses.append(value)
            step += 1

        mean_loss = sum(epoch_losses) / len(epoch_losses)
        state.epochs.append(EpochRecord(phase="distill", epoch=epoch, loss=mean_loss))
        logger.info(f"[distill] epoch {epoch}/{cfg.epochs} loss={mean_loss:.6f}")

    student.eval()
    return state
