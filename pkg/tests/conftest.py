"""Shared test fixtures for the anomaly-detection test suite."""

import dataclasses
import json
import os

import numpy as np
import pytest
import torch
from PIL import Image

from backbone import build_backbone
from config import BackboneConfig, SynthConfig, parse_run_config

FIXTURES_DIR = os.path.join(os.path.dirname(__file__), "fixtures")


def load_fixture(filename):
    """Load a fixture file by name."""
    path = os.path.join(FIXTURES_DIR, filename)
    with open(path) as f:
        if filename.endswith(".json"):
            return json.load(f)
        return f.read()


@pytest.fixture(autouse=True)
def fixed_torch_seed():
    """Every test starts from the same global torch RNG state."""
    torch.manual_seed(0)
    yield


@pytest.fixture
def fixture_path():
    """Return the path to the fixtures directory."""
    return FIXTURES_DIR


@pytest.fixture
def sample_config():
    """The small run config used by the CLI tests, parsed."""
    return parse_run_config(load_fixture("sample_run_config.json"))


@pytest.fixture
def sample_config_path():
    return os.path.join(FIXTURES_DIR, "sample_run_config.json")


@pytest.fixture
def tiny_cfg():
    """A backbone small enough to train in a unit test (32px input, 3 classes)."""
    return BackboneConfig(
        input_size=32,
        stem_channels=4,
        block_channels=[4, 8, 8],
        blocks_per_stage=1,
        num_classes=3,
    )


@pytest.fixture
def make_backbone(tiny_cfg):
    """Factory fixture for seeded backbones with config overrides."""

    def _make(seed=0, **overrides):
        cfg = dataclasses.replace(tiny_cfg, **overrides)
        return build_backbone(cfg, seed)

    return _make


@pytest.fixture
def write_png():
    """Write an array as an 8-bit PNG, creating parent directories."""

    def _write(path, array):
        os.makedirs(os.path.dirname(path), exist_ok=True)
        Image.fromarray(np.asarray(array, dtype=np.uint8)).save(path, format="PNG")
        return str(path)

    return _write


@pytest.fixture
def make_mvtec_tree(tmp_path, write_png):
    """Factory fixture building a minimal MVTec-style tree of flat-colored images."""

    def _make(categories=("bottle",), n_train=2, n_test_good=1, n_defect=1, with_masks=True, size=32):
        root = tmp_path / "mvtec"
        for c_idx, category in enumerate(categories):
            cat = root / category
            shade = 60 + 40 * c_idx
            flat = np.full((size, size, 3), shade, dtype=np.uint8)
            for i in range(n_train):
                write_png(str(cat / "train" / "good" / f"{i:03d}.png"), flat)
            for i in range(n_test_good):
                write_png(str(cat / "test" / "good" / f"{i:03d}.png"), flat)
            for i in range(n_defect):
                img = flat.copy()
                img[4:12, 4:12] = 255
                write_png(str(cat / "test" / "scratch" / f"{i:03d}.png"), img)
                if with_masks:
                    mask = np.zeros((size, size), dtype=np.uint8)
                    mask[4:12, 4:12] = 255
                    write_png(str(cat / "ground_truth" / "scratch" / f"{i:03d}_mask.png"), mask)
        return str(root)

    return _make


@pytest.fixture(scope="session")
def small_synth_cfg():
    return SynthConfig(
        categories=3,
        image_size=32,
        train_good_per_cat=6,
        test_good_per_cat=3,
        test_defect_per_cat=3,
        defect_area_fraction=(0.02, 0.1),
        seed=7,
    )


@pytest.fixture(scope="session")
def small_synth(tmp_path_factory, small_synth_cfg):
    """A tiny synthetic dataset written once per session: (root, index)."""
    from synth import generate_synthetic

    root = str(tmp_path_factory.mktemp("synth"))
    index = generate_synthetic(small_synth_cfg, root)
    return root, index


def finite_difference_failures(loss_fn, params, n_samples=120, h=1e-4, seed=0):
    """Compare autograd with central differences on randomly sampled scalar parameters.

    Returns the (name, analytic, numeric) triples outside
    |a - n| <= 1e-3 * max(|a|, |n|) + 1e-6.
    """
    named = list(params)
    tensors = [p for _, p in named]
    grads = torch.autograd.grad(loss_fn(), tensors)
    slots = [(i, j) for i, p in enumerate(tensors) for j in range(p.numel())]
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(slots), size=min(n_samples, len(slots)), replace=False)

    failures = []
    with torch.no_grad():
        for k in picks:
            i, j = slots[k]
            flat = tensors[i].view(-1)
            original = flat[j].item()
            flat[j] = original + h
            plus = loss_fn().item()
            flat[j] = original - h
            minus = loss_fn().item()
            flat[j] = original
            numeric = (plus - minus) / (2 * h)
            analytic = grads[i].view(-1)[j].item()
            if abs(analytic - numeric) > 1e-3 * max(abs(analytic), abs(numeric)) + 1e-6:
                failures.append((f"{named[i][0]}[{j}]", analytic, numeric))
    return failures
