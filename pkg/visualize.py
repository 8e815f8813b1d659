"""Heatmap overlays and anomaly-map file export."""

import logging
import os

import matplotlib
import numpy as np
from PIL import Image

from errors import DatasetIOError, ShapeError

logger = logging.getLogger(__name__)

COLORMAP = "jet"  # blue -> red
OVERLAY_ALPHA = 0.5


def save_map(values: np.ndarray, path: str) -> str:
    """Write an (H, W) anomaly map as a float32 .npy array."""
    arr = np.asarray(values, dtype=np.float32)
    if arr.ndim != 2:
        raise ShapeError(f"Expected an (H, W) map, got shape {arr.shape}")
    try:
        parent = os.path.dirname(path)
        if parent:
            os.makedirs(parent, exist_ok=True)
        np.save(path, arr)
    except OSError as e:
        raise DatasetIOError(f"Cannot write map {path}: {e}") from e
    return path


def load_map(path: str) -> np.ndarray:
    try:
        arr = np.load(path)
    except (OSError, ValueError) as e:
        raise DatasetIOError(f"Cannot read map {path}: {e}") from e
    if arr.ndim != 2:
        raise ShapeError(f"Map {path} must be 2-D, got shape {arr.shape}")
    return arr.astype(np.float32)


def colorize(values: np.ndarray) -> np.ndarray:
    """8-bit RGB heatmap over [0, per-image max]."""
    arr = np.asarray(values, dtype=np.float64)
    peak = arr.max() if arr.size else 0.0
    scaled = np.clip(arr / peak, 0.0, 1.0) if peak > 0 else np.zeros_like(arr)
    rgba = matplotlib.colormaps[COLORMAP](scaled)
    return np.round(rgba[..., :3] * 255.0).astype(np.uint8)


def render_overlay(values: np.ndarray, image_path: str, out_path: str, alpha: float = OVERLAY_ALPHA) -> str:
    """Blend the colorized map over the source image (resized to the map) and save as PNG."""
    heat = Image.fromarray(colorize(values))
    try:
        with Image.open(image_path) as img:
            base = img.convert("RGB").resize(heat.size, Image.Resampling.BILINEAR)
        overlay = Image.blend(base, heat, alpha)
        parent = os.path.dirname(out_path)
        if parent:
            os.makedirs(parent, exist_ok=True)
        overlay.save(out_path, format="PNG")
    except OSError as e:
        raise DatasetIOError(f"Cannot render overlay for {image_path}: {e}") from e
    logger.info(f"Heatmap overlay saved to {out_path}")
    return out_path
