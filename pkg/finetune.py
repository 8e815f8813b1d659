"""Enhanced-teacher stage: category classification with a freeze/unfreeze schedule.

Phase 1 trains only the fresh head while the body stays frozen; phase 2
unfreezes everything. There is no early stopping: a little over-fitting here
makes the teacher's features more task specific.
"""

import logging
import math

import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader

from backbone import Backbone, check_batch_norm_batches, classify, set_trainable
from config import FinetuneConfig
from dataset import LabeledDataset
from errors import DataError, NumericError, ShapeError
from models import EpochRecord

logger = logging.getLogger(__name__)


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Batch mean of -log softmax(logits)[label]."""
    if logits.dim() != 2 or labels.dim() != 1 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"Expected logits (N, K) and labels (N,), got {tuple(logits.shape)} and {tuple(labels.shape)}")
    k = logits.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"Labels must lie in [0, {k}), got range [{labels.min().item()}, {labels.max().item()}]")
    return F.cross_entropy(logits, labels.long())


@torch.no_grad()
def eval_accuracy(b: Backbone, ds: LabeledDataset, batch_size: int = 64) -> float:
    """Fraction of items whose argmax logit equals the label."""
    if len(ds) == 0:
        raise DataError("Cannot measure accuracy on an empty dataset")
    if b.config.num_classes != ds.num_classes:
        raise ShapeError(f"Head has {b.config.num_classes} outputs but the dataset has {ds.num_classes} classes")
    was_training = b.training
    b.eval()
    correct = 0
    for images, labels in DataLoader(ds, batch_size=batch_size, shuffle=False):
        preds = classify(b, images).argmax(dim=1)
        correct += (preds == labels).sum().item()
    b.train(was_training)
    return correct / len(ds)


def _run_phase(
    b: Backbone,
    ds: LabeledDataset,
    cfg: FinetuneConfig,
    scope: str,
    epochs: int,
    generator: torch.Generator,
    history: list[EpochRecord],
) -> None:
    if epochs == 0:
        return
    set_trainable(b, scope)
    optimizer = torch.optim.SGD(
        [p for p in b.parameters() if p.requires_grad],
        lr=cfg.learning_rate,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
    )
    loader = DataLoader(ds, batch_size=cfg.batch_size, shuffle=True, drop_last=False, generator=generator)
    for epoch in range(1, epochs + 1):
        b.train()
        total, seen = 0.0, 0
        for step, (images, labels) in enumerate(loader):
            loss = cross_entropy(classify(b, images), labels)
            if not math.isfinite(loss.item()):
                raise NumericError(f"[finetune/{scope}] loss became {loss.item()}", step)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * len(labels)
            seen += len(labels)

        accuracy = eval_accuracy(b, ds)
        record = EpochRecord(phase=scope, epoch=epoch, loss=total / seen, accuracy=accuracy)
        history.append(record)
        logger.info(f"[finetune/{scope}] epoch {epoch}/{epochs} loss={record.loss:.4f} acc={accuracy:.3f}")


def run_finetune(
    teacher: Backbone, ds: LabeledDataset, cfg: FinetuneConfig
) -> tuple[Backbone, list[EpochRecord]]:
    """Head warm-up on a frozen body, then all layers. Returns the teacher and per-epoch history."""
    if len(ds) == 0:
        raise DataError("Fine-tuning needs at least one labeled image")
    if not teacher.has_head or teacher.config.num_classes != ds.num_classes:
        raise ShapeError(
            f"Teacher head must have {ds.num_classes} outputs; call replace_head first"
        )

    history: list[EpochRecord] = []
    generator = torch.Generator().manual_seed(cfg.seed)
    if cfg.full_epochs:
        check_batch_norm_batches(teacher, len(ds), cfg.batch_size, with_stage4=True)
    _run_phase(teacher, ds, cfg, "head_only", cfg.head_warmup_epochs, generator, history)
    _run_phase(teacher, ds, cfg, "all", cfg.full_epochs, generator, history)
    teacher.eval()
    return teacher, history
