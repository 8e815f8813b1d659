"""Dataset ingestion for the MVTec-AD directory convention.

Layout per category::

    <category>/train/good/*
    <category>/test/good/*
    <category>/test/<defect_type>/*
    <category>/ground_truth/<defect_type>/<image stem>_mask.<ext>
"""

import logging
import math
import os

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF
from PIL import Image
from torch.utils.data import Dataset

from errors import DataError, DatasetIOError
from models import DatasetIndex, DatasetRecord

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
MASK_SUFFIX = "_mask"

# Conventional large-corpus channel statistics.
CHANNEL_MEAN = (0.485, 0.456, 0.406)
CHANNEL_STD = (0.229, 0.224, 0.225)


def _list_images(directory: str) -> list[str]:
    if not os.path.isdir(directory):
        return []
    return sorted(
        os.path.join(directory, name)
        for name in os.listdir(directory)
        if os.path.splitext(name)[1].lower() in IMAGE_EXTENSIONS
    )


def _stem(path: str) -> str:
    return os.path.splitext(os.path.basename(path))[0]


def _pair_masks(category_dir: str, defect_type: str, images: list[str]) -> dict[str, str]:
    """Map each defect image to its mask; the pairing must be one-to-one."""
    gt_dir = os.path.join(category_dir, "ground_truth", defect_type)
    masks = {}
    for mask_path in _list_images(gt_dir):
        stem = _stem(mask_path)
        if not stem.endswith(MASK_SUFFIX):
            continue
        key = stem[: -len(MASK_SUFFIX)]
        if key in masks:
            raise DataError(f"Two masks claim image stem '{key}' in {gt_dir}")
        masks[key] = mask_path

    paired = {}
    for image_path in images:
        mask_path = masks.pop(_stem(image_path), None)
        if mask_path is None:
            raise DataError(f"No ground-truth mask for defect image {image_path}")
        paired[image_path] = mask_path
    if masks:
        orphan = sorted(masks.values())[0]
        raise DataError(f"Mask without a matching test image: {orphan}")
    return paired


def index_mvtec(root: str) -> DatasetIndex:
    """Enumerate every image under ``root``; categories sorted for stable class ids."""
    if not os.path.isdir(root):
        raise DatasetIOError(f"Dataset root is not a directory: {root}")
    categories = sorted(
        name for name in os.listdir(root)
        if os.path.isdir(os.path.join(root, name)) and not name.startswith(".")
    )
    if not categories:
        raise DataError(f"No category directories under {root}")

    records = []
    for category in categories:
        category_dir = os.path.join(root, category)
        train = _list_images(os.path.join(category_dir, "train", "good"))
        if not train:
            raise DataError(f"Category '{category}' has no train/good images")
        records.extend(DatasetRecord(p, category, "train", "good") for p in train)

        test_dir = os.path.join(category_dir, "test")
        subdirs = sorted(os.listdir(test_dir)) if os.path.isdir(test_dir) else []
        for sub in subdirs:
            images = _list_images(os.path.join(test_dir, sub))
            if sub == "good":
                records.extend(DatasetRecord(p, category, "test", "good") for p in images)
                continue
            paired = _pair_masks(category_dir, sub, images)
            records.extend(
                DatasetRecord(p, category, "test", "defect", defect_type=sub, mask_path=paired[p])
                for p in images
            )

    index = DatasetIndex(records=records, categories=categories)
    n_masks = sum(1 for r in records if r.mask_path)
    logger.info(f"Indexed {len(records)} images, {n_masks} masks across {len(categories)} categories in {root}")
    return index


def load_image(path: str, size: int) -> torch.Tensor:
    """Decode, resize (bilinear, half-pixel) and channel-standardize to a (3, size, size) tensor."""
    try:
        with Image.open(path) as img:
            pixels = TF.pil_to_tensor(img.convert("RGB"))
    except OSError as e:
        raise DatasetIOError(f"Cannot decode image {path}: {e}") from e

    x = pixels.to(torch.float32).div(255.0).unsqueeze(0)
    if tuple(x.shape[-2:]) != (size, size):
        x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
    return TF.normalize(x[0], CHANNEL_MEAN, CHANNEL_STD)


def load_mask(path: str, size: int) -> np.ndarray:
    """Binary (size, size) uint8 mask, nearest-neighbor resized, any nonzero pixel counts."""
    try:
        with Image.open(path) as img:
            gray = img.convert("L")
            if gray.size != (size, size):
                gray = gray.resize((size, size), Image.Resampling.NEAREST)
            arr = np.asarray(gray)
    except OSError as e:
        raise DatasetIOError(f"Cannot decode mask {path}: {e}") from e
    return (arr > 0).astype(np.uint8)


class ImageDataset(Dataset):
    """Images with optional integer labels, decoded once and kept in memory."""

    def __init__(self, paths: list[str], size: int, labels: list[int] | None = None):
        self.paths = list(paths)
        self.size = size
        self.labels = list(labels) if labels is not None else [-1] * len(self.paths)
        if len(self.labels) != len(self.paths):
            raise DataError("Every image needs exactly one label")
        self._cache: dict[int, torch.Tensor] = {}

    def __len__(self) -> int:
        return len(self.paths)

    def __getitem__(self, idx: int) -> tuple[torch.Tensor, int]:
        if idx not in self._cache:
            self._cache[idx] = load_image(self.paths[idx], self.size)
        return self._cache[idx], self.labels[idx]


class LabeledDataset(ImageDataset):
    """(image path, class id) items for the classification stage."""

    def __init__(self, items: list[tuple[str, int]], num_classes: int, size: int):
        if num_classes < 2:
            raise DataError(f"A labeled dataset needs at least 2 classes, got {num_classes}")
        for path, label in items:
            if not 0 <= label < num_classes:
                raise DataError(f"Label {label} out of range [0, {num_classes}) for {path}")
        super().__init__([p for p, _ in items], size, [label for _, label in items])
        self.items = list(items)
        self.num_classes = num_classes


def build_finetune_dataset(index: DatasetIndex, size: int, abnormal_fraction: float) -> LabeledDataset:
    """All normal train images plus the first share of each category's defect images.

    Defective images keep their category label, so the class space is the
    category list.
    """
    items = [(r.image_path, index.class_id(r.category)) for r in index.select(split="train")]
    for category in index.categories:
        defects = sorted(index.select(category=category, split="test", label="defect"),
                         key=lambda r: r.image_path)
        n_take = math.ceil(abnormal_fraction * len(defects))
        items.extend((r.image_path, index.class_id(category)) for r in defects[:n_take])
    logger.info(f"Fine-tuning set: {len(items)} images over {len(index.categories)} classes")
    return LabeledDataset(items, num_classes=len(index.categories), size=size)


def normal_train_dataset(index: DatasetIndex, size: int) -> ImageDataset:
    """Anomaly-free training images for distillation."""
    records = index.select(split="train")
    if any(r.is_defect for r in records):
        raise DataError("Distillation set contains a defect image")
    return ImageDataset([r.image_path for r in records], size)
