"""Deterministic synthetic texture-defect dataset written in the MVTec-AD layout.

Each category is one texture family (sinusoidal grating, checker, filtered
noise) with fixed per-category parameters and small per-image jitter. Test
defects are ellipse or rectangle patches where the texture phase is disrupted
and the intensity shifted; the masks mark exactly the altered pixels.
"""

import logging
import math
import os

import numpy as np
from PIL import Image
from scipy import ndimage

from config import SynthConfig
from dataset import index_mvtec
from errors import ConfigError, DatasetIOError
from models import DatasetIndex

logger = logging.getLogger(__name__)

PHASE_JITTER = 0.3  # radians
PIXEL_NOISE = 0.02
AMPLITUDE = 0.35
SHIFT_RANGE = (0.2, 0.35)
MAX_PLACEMENT_TRIES = 200

_SPLIT_CODES = {"train": 0, "test_good": 1, "test_defect": 2}


def _category_params(kind: str, size: int, rng: np.random.Generator) -> dict:
    params = {
        "kind": kind,
        "tint": rng.uniform(0.6, 1.0, size=3),
        "offset": rng.uniform(0.0, 0.15, size=3),
    }
    if kind == "grating":
        params["freq"] = rng.uniform(3.0, 6.0) / size
        params["angle"] = rng.uniform(0.0, math.pi)
    elif kind == "checker":
        params["cell"] = rng.uniform(size / 8, size / 5)
    else:
        params["field"] = _smooth_noise(size, rng)
    return params


def _smooth_noise(size: int, rng: np.random.Generator) -> np.ndarray:
    field = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=size / 16, mode="wrap")
    field = (field - field.mean()) / (field.std() + 1e-12)
    return np.tanh(field)


def _texture(params: dict, size: int, rng: np.random.Generator, disrupted: bool = False) -> np.ndarray:
    """Grayscale texture in [0, 1]; ``disrupted`` draws the phase-broken variant used inside defects."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    phase = rng.uniform(-PHASE_JITTER, PHASE_JITTER)
    kind = params["kind"]
    if kind == "grating":
        angle = params["angle"] + (math.pi / 2 if disrupted else 0.0)
        proj = xx * math.cos(angle) + yy * math.sin(angle)
        wave = np.sin(2 * math.pi * params["freq"] * proj + phase + (math.pi if disrupted else 0.0))
    elif kind == "checker":
        k = math.pi / params["cell"]
        wave = np.tanh(4 * np.sin(k * xx + phase + (math.pi if disrupted else 0.0)) * np.sin(k * yy + phase))
    else:
        base = _smooth_noise(size, rng) if disrupted else params["field"]
        wave = base + 0.1 * _smooth_noise(size, rng)
    return np.clip(0.5 + AMPLITUDE * wave, 0.0, 1.0)


def _defect_mask(size: int, area_range: tuple[float, float], rng: np.random.Generator) -> tuple[str, np.ndarray]:
    """Ellipse or rectangle mask whose pixel area fraction lands inside ``area_range``."""
    lo, hi = area_range
    total = size * size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    for _ in range(MAX_PLACEMENT_TRIES):
        target = rng.uniform(lo, hi) * total
        aspect = rng.uniform(0.5, 2.0)
        if rng.random() < 0.5:
            shape = "ellipse"
            a = math.sqrt(target * aspect / math.pi)
            b = math.sqrt(target / (math.pi * aspect))
            if 2 * a >= size or 2 * b >= size:
                continue
            cx = rng.uniform(a, size - a)
            cy = rng.uniform(b, size - b)
            mask = ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2 <= 1.0
        else:
            shape = "rectangle"
            w = max(1, int(round(math.sqrt(target * aspect))))
            h = max(1, int(round(target / w)))
            if w > size or h > size:
                continue
            x0 = int(rng.integers(0, size - w + 1))
            y0 = int(rng.integers(0, size - h + 1))
            mask = np.zeros((size, size), dtype=bool)
            mask[y0:y0 + h, x0:x0 + w] = True
        if lo <= mask.sum() / total <= hi:
            return shape, mask
    raise ConfigError(f"Could not place a defect with area fraction in {area_range} on a {size}px image")


def _to_rgb(gray: np.ndarray, params: dict, rng: np.random.Generator) -> np.ndarray:
    rgb = gray[..., None] * params["tint"] + params["offset"]
    rgb = rgb + rng.normal(0.0, PIXEL_NOISE, size=rgb.shape)
    return np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)


def _save_png(array: np.ndarray, path: str) -> None:
    try:
        os.makedirs(os.path.dirname(path), exist_ok=True)
        Image.fromarray(array).save(path, format="PNG")
    except OSError as e:
        raise DatasetIOError(f"Cannot write {path}: {e}") from e


def _image_rng(cfg: SynthConfig, cat_idx: int, split: str, i: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, cat_idx, _SPLIT_CODES[split], i])


def generate_synthetic(cfg: SynthConfig, out_dir: str) -> DatasetIndex:
    """Write the synthetic benchmark under ``out_dir`` and index it.

    Output bytes depend only on ``cfg`` (seed included).
    """
    if os.path.isdir(out_dir) and os.listdir(out_dir):
        logger.warning(f"Output directory {out_dir} is not empty; files will be overwritten")
    size = cfg.image_size
    names = []
    for cat_idx, kind in enumerate(cfg.kinds()):
        category = f"{kind}_{cat_idx:02d}"
        names.append(category)
        params = _category_params(kind, size, np.random.default_rng([cfg.seed, cat_idx]))
        cat_dir = os.path.join(out_dir, category)

        for i in range(cfg.train_good_per_cat):
            rng = _image_rng(cfg, cat_idx, "train", i)
            img = _to_rgb(_texture(params, size, rng), params, rng)
            _save_png(img, os.path.join(cat_dir, "train", "good", f"{i:03d}.png"))

        for i in range(cfg.test_good_per_cat):
            rng = _image_rng(cfg, cat_idx, "test_good", i)
            img = _to_rgb(_texture(params, size, rng), params, rng)
            _save_png(img, os.path.join(cat_dir, "test", "good", f"{i:03d}.png"))

        for i in range(cfg.test_defect_per_cat):
            rng = _image_rng(cfg, cat_idx, "test_defect", i)
            gray = _texture(params, size, rng)
            shape, mask = _defect_mask(size, cfg.defect_area_fraction, rng)
            shift = rng.choice([-1.0, 1.0]) * rng.uniform(*SHIFT_RANGE)
            disrupted = np.clip(_texture(params, size, rng, disrupted=True) + shift, 0.0, 1.0)
            gray = np.where(mask, disrupted, gray)
            _save_png(_to_rgb(gray, params, rng), os.path.join(cat_dir, "test", shape, f"{i:03d}.png"))
            mask_img = mask.astype(np.uint8) * 255
            _save_png(mask_img, os.path.join(cat_dir, "ground_truth", shape, f"{i:03d}_mask.png"))

        logger.info(
            f"[synth/{category}] wrote {cfg.train_good_per_cat} train, "
            f"{cfg.test_good_per_cat} good + {cfg.test_defect_per_cat} defect test images"
        )

    logger.info(f"Synthetic dataset with categories {names} written to {out_dir}")
    return index_mvtec(out_dir)
