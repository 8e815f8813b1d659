"""Tests for backbone.py — pyramid extractor, head swap, freeze scopes."""

import dataclasses

import pytest
import torch

from backbone import (
    build_backbone,
    check_batch_norm_batches,
    classify,
    clone_backbone,
    deepest_side,
    extract_pyramid,
    replace_head,
    set_trainable,
)
from config import BackboneConfig
from errors import ConfigError, ShapeError, StateError
from finetune import cross_entropy
from tests.conftest import finite_difference_failures


def _body_snapshot(b):
    return {n: p.detach().clone() for n, p in b.body_parameters()}


def _sgd_step(b, batch, labels):
    optimizer = torch.optim.SGD([p for p in b.parameters() if p.requires_grad], lr=0.1)
    b.train()
    loss = cross_entropy(classify(b, batch), labels)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()


# --- build_backbone ---

def test_same_seed_gives_identical_parameters():
    """Two builds with one seed match elementwise."""
    a = build_backbone(BackboneConfig(), seed=7)
    b = build_backbone(BackboneConfig(), seed=7)
    for (name, pa), (_, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(pa, pb), name


def test_different_seed_changes_parameters():
    """Seeds 7 and 8 differ somewhere."""
    a = build_backbone(BackboneConfig(), seed=7)
    b = build_backbone(BackboneConfig(), seed=8)
    assert any(not torch.equal(pa, pb) for pa, pb in zip(a.parameters(), b.parameters()))


def test_default_head_shape():
    """Default config → (15, 256) head weights."""
    b = build_backbone(BackboneConfig(), seed=0)
    assert tuple(b.fc.weight.shape) == (15, 256)


def test_stage4_feeds_a_wider_head(tiny_cfg):
    """With the stage-4 flag the head reads twice the last pyramid width."""
    b = build_backbone(dataclasses.replace(tiny_cfg, include_stage4_for_finetune=True), seed=0)
    assert b.layer4 is not None
    assert tuple(b.fc.weight.shape) == (3, 16)
    assert classify(b, torch.randn(2, 3, 32, 32)).shape == (2, 3)


def test_no_head_when_num_classes_is_zero(make_backbone):
    """num_classes=0 builds a pure extractor."""
    b = make_backbone(num_classes=0)
    assert b.fc is None
    assert not b.head_parameters()


def test_depth_scale_shrinks_widths():
    """depth_scale 1/4 rounds each width."""
    cfg = BackboneConfig(input_size=64, depth_scale=0.25, num_classes=3)
    assert cfg.stem_width == 16
    assert cfg.stage_widths == [16, 32, 64]


def test_invalid_config_rejected():
    """Non-divisible input size and zero-width stages are configuration errors."""
    with pytest.raises(ConfigError):
        BackboneConfig(input_size=100)
    with pytest.raises(ConfigError):
        BackboneConfig(block_channels=[1, 1, 1], depth_scale=0.1)
    with pytest.raises(ConfigError):
        BackboneConfig(block_channels=[64, 128])


# --- extract_pyramid ---

def test_default_pyramid_shapes():
    """(2,3,256,256) → levels /4, /8, /16 at 64, 128, 256 channels."""
    b = build_backbone(BackboneConfig(), seed=0)
    with torch.no_grad():
        pyramid = extract_pyramid(b, torch.randn(2, 3, 256, 256))
    assert pyramid.shapes == [(2, 64, 64, 64), (2, 128, 32, 32), (2, 256, 16, 16)]


def test_zero_batch_is_finite(make_backbone):
    """Zero input gives finite features at every level."""
    b = make_backbone()
    with torch.no_grad():
        pyramid = extract_pyramid(b, torch.zeros(2, 3, 32, 32))
    assert all(torch.isfinite(level).all() for level in pyramid)


def test_identical_images_identical_features(make_backbone):
    """No coupling across the batch in evaluation mode."""
    b = make_backbone()
    image = torch.randn(1, 3, 32, 32)
    with torch.no_grad():
        pyramid = extract_pyramid(b, image.repeat(3, 1, 1, 1))
    for level in pyramid:
        assert torch.allclose(level[0], level[1], rtol=0, atol=1e-6)
        assert torch.allclose(level[0], level[2], rtol=0, atol=1e-6)


def test_wrong_input_shape(make_backbone):
    """Size or channel mismatches raise ShapeError."""
    b = make_backbone()
    with pytest.raises(ShapeError):
        extract_pyramid(b, torch.zeros(1, 3, 64, 64))
    with pytest.raises(ShapeError):
        extract_pyramid(b, torch.zeros(1, 1, 32, 32))
    with pytest.raises(ShapeError):
        extract_pyramid(b, torch.zeros(3, 32, 32))


# --- replace_head ---

def test_replace_head_keeps_body():
    """15-class head on the default backbone leaves body parameters untouched."""
    b = build_backbone(BackboneConfig(num_classes=0), seed=0)
    before = _body_snapshot(b)
    replace_head(b, 15)
    assert b.fc.out_features == 15
    for name, p in b.body_parameters():
        assert torch.equal(p, before[name]), name


def test_replace_head_two_classes(make_backbone):
    b = replace_head(make_backbone(), 2)
    assert b.fc.out_features == 2
    assert b.config.num_classes == 2


def test_replace_head_deterministic(make_backbone):
    """Same seed → same head init."""
    a = replace_head(make_backbone(), 5, seed=3)
    b = replace_head(make_backbone(), 5, seed=3)
    assert torch.equal(a.fc.weight, b.fc.weight)
    assert torch.equal(a.fc.bias, b.fc.bias)


def test_replace_head_rejects_single_class(make_backbone):
    with pytest.raises(ConfigError):
        replace_head(make_backbone(), 1)


# --- set_trainable ---

def test_head_only_step_freezes_body(make_backbone):
    """One SGD step in head_only leaves the body bitwise unchanged, buffers included."""
    b = set_trainable(make_backbone(), "head_only")
    before = {k: v.clone() for k, v in b.state_dict().items() if not k.startswith("fc.")}
    head_before = b.fc.weight.detach().clone()
    _sgd_step(b, torch.randn(4, 3, 32, 32), torch.tensor([0, 1, 2, 0]))
    for key, value in b.state_dict().items():
        if not key.startswith("fc."):
            assert torch.equal(value, before[key]), key
    assert not torch.equal(b.fc.weight, head_before)


def test_all_scope_updates_body(make_backbone):
    """A step with scope 'all' moves at least one body parameter."""
    b = set_trainable(make_backbone(), "all")
    before = _body_snapshot(b)
    _sgd_step(b, torch.randn(4, 3, 32, 32), torch.tensor([0, 1, 2, 0]))
    assert any(not torch.equal(p, before[n]) for n, p in b.body_parameters())


def test_scope_transition(make_backbone):
    """head_only then all → the body starts updating."""
    b = set_trainable(make_backbone(), "head_only")
    batch, labels = torch.randn(4, 3, 32, 32), torch.tensor([0, 1, 2, 0])
    _sgd_step(b, batch, labels)
    frozen = _body_snapshot(b)
    set_trainable(b, "all")
    _sgd_step(b, batch, labels)
    assert any(not torch.equal(p, frozen[n]) for n, p in b.body_parameters())


def test_set_trainable_errors(make_backbone):
    with pytest.raises(ConfigError):
        set_trainable(make_backbone(), "layer3")
    with pytest.raises(StateError):
        set_trainable(make_backbone(num_classes=0), "head_only")


# --- classify ---

def test_logits_shape():
    """N=4, 15 classes → (4, 15)."""
    b = build_backbone(BackboneConfig(input_size=64, depth_scale=0.25), seed=0)
    assert classify(b, torch.randn(4, 3, 64, 64)).shape == (4, 15)


def test_identical_inputs_identical_logits(make_backbone):
    b = make_backbone()
    image = torch.randn(1, 3, 32, 32)
    with torch.no_grad():
        logits = classify(b, image.repeat(2, 1, 1, 1))
    assert torch.allclose(logits[0], logits[1], rtol=0, atol=1e-6)


def test_classify_without_head(make_backbone):
    with pytest.raises(StateError):
        classify(make_backbone(num_classes=0), torch.zeros(1, 3, 32, 32))


def test_cross_entropy_gradients_match_finite_differences(make_backbone):
    """Autograd through classify → cross-entropy agrees with central differences."""
    b = make_backbone(input_size=16, stem_channels=2, block_channels=[2, 4, 4]).double()
    b.eval()
    generator = torch.Generator().manual_seed(1)
    batch = torch.randn(3, 3, 16, 16, generator=generator, dtype=torch.float64)
    labels = torch.tensor([0, 2, 1])

    failures = finite_difference_failures(
        lambda: cross_entropy(classify(b, batch), labels), b.named_parameters(), n_samples=120
    )
    assert failures == []


# --- clone_backbone ---

def test_clone_is_independent(make_backbone):
    a = make_backbone()
    b = clone_backbone(a)
    with torch.no_grad():
        b.conv1.weight.add_(1.0)
    assert not torch.equal(a.conv1.weight, b.conv1.weight)
    assert torch.equal(a.bn1.weight, b.bn1.weight)


# --- training batch checks ---

def test_deepest_side(make_backbone):
    assert deepest_side(make_backbone()) == 2
    assert deepest_side(make_backbone(input_size=16)) == 1
    staged = make_backbone(include_stage4_for_finetune=True)
    assert deepest_side(staged) == 2
    assert deepest_side(staged, with_stage4=True) == 1


@pytest.mark.parametrize("n_images, batch_size", [(3, 2), (1, 8), (9, 4)])
def test_lone_image_on_one_by_one_map_rejected(make_backbone, n_images, batch_size):
    with pytest.raises(ConfigError):
        check_batch_norm_batches(make_backbone(input_size=16), n_images, batch_size)


@pytest.mark.parametrize("n_images, batch_size", [(4, 2), (2, 8), (10, 4)])
def test_batches_of_two_or_more_pass(make_backbone, n_images, batch_size):
    check_batch_norm_batches(make_backbone(input_size=16), n_images, batch_size)


def test_larger_maps_allow_lone_images(make_backbone):
    check_batch_norm_batches(make_backbone(), 3, 2)
