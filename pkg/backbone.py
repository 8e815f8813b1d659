"""ResNet-18-style feature extractor shared by the teacher and the student.

Stem (7x7 conv stride 2, 3x3 max-pool stride 2) followed by three stages of
basic residual blocks with strides 1, 2, 2. Each stage output is one level of
the feature pyramid. An optional linear head on the pooled last stage turns
the extractor into a classifier for fine-tuning.
"""

import copy
import dataclasses
import logging
import math

import torch
import torch.nn.functional as F
from torch import nn
from torchvision.models.resnet import BasicBlock

from config import BackboneConfig
from errors import ConfigError, ShapeError, StateError
from models import FeaturePyramid

logger = logging.getLogger(__name__)

TRAINABLE_SCOPES = ("head_only", "all")
HEAD_PREFIX = "fc."


class Backbone(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.config = cfg
        self.trainable_scope = "all"

        stem = cfg.stem_width
        widths = cfg.stage_widths
        self.conv1 = nn.Conv2d(3, stem, kernel_size=7, stride=2, padding=3, bias=False)
        self.bn1 = nn.BatchNorm2d(stem)
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool2d(kernel_size=3, stride=2, padding=1)
        self.layer1 = _make_stage(stem, widths[0], cfg.blocks_per_stage, stride=1)
        self.layer2 = _make_stage(widths[0], widths[1], cfg.blocks_per_stage, stride=2)
        self.layer3 = _make_stage(widths[1], widths[2], cfg.blocks_per_stage, stride=2)
        # Only used by classify(); the pyramid never reads it.
        self.layer4 = (
            _make_stage(widths[2], 2 * widths[2], cfg.blocks_per_stage, stride=2)
            if cfg.include_stage4_for_finetune else None
        )
        self.fc = nn.Linear(cfg.head_in_features, cfg.num_classes) if cfg.num_classes else None

    @property
    def has_head(self) -> bool:
        return self.fc is not None

    def forward(self, x: torch.Tensor) -> FeaturePyramid:
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        f1 = self.layer1(x)
        f2 = self.layer2(f1)
        f3 = self.layer3(f2)
        return FeaturePyramid(levels=[f1, f2, f3])

    def train(self, mode: bool = True) -> "Backbone":
        super().train(mode)
        # A frozen body keeps its normalization statistics too.
        if mode and self.trainable_scope == "head_only":
            for name, child in self.named_children():
                if name != "fc":
                    child.eval()
        return self

    def body_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if not n.startswith(HEAD_PREFIX)]

    def head_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if n.startswith(HEAD_PREFIX)]


def _make_stage(in_channels: int, out_channels: int, blocks: int, stride: int) -> nn.Sequential:
    downsample = None
    if stride != 1 or in_channels != out_channels:
        downsample = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, kernel_size=1, stride=stride, bias=False),
            nn.BatchNorm2d(out_channels),
        )
    layers = [BasicBlock(in_channels, out_channels, stride=stride, downsample=downsample)]
    layers += [BasicBlock(out_channels, out_channels) for _ in range(blocks - 1)]
    return nn.Sequential(*layers)


@torch.no_grad()
def _init_linear(layer: nn.Linear, generator: torch.Generator) -> None:
    layer.weight.normal_(0.0, 1.0 / math.sqrt(layer.in_features), generator=generator)
    layer.bias.zero_()


@torch.no_grad()
def _init_parameters(model: Backbone, generator: torch.Generator) -> None:
    """Fan-in scaled Gaussian convolutions, unit/zero normalization, zero biases."""
    for module in model.modules():
        if isinstance(module, nn.Conv2d):
            fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1] // module.groups
            module.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=generator)
            if module.bias is not None:
                module.bias.zero_()
        elif isinstance(module, nn.BatchNorm2d):
            module.reset_running_stats()
            module.weight.fill_(1.0)
            module.bias.zero_()
        elif isinstance(module, nn.Linear):
            _init_linear(module, generator)


def build_backbone(cfg: BackboneConfig, seed: int) -> Backbone:
    """Build a backbone whose parameters are a pure function of (cfg, seed)."""
    cfg.validate()
    model = Backbone(cfg)
    generator = torch.Generator().manual_seed(seed)
    _init_parameters(model, generator)
    model.eval()
    n_params = sum(p.numel() for p in model.parameters())
    logger.debug(f"Built backbone with {n_params} parameters (seed {seed})")
    return model


def extract_pyramid(b: Backbone, batch: torch.Tensor) -> FeaturePyramid:
    """Run the three-stage pyramid on a (N, 3, H, W) batch."""
    size = b.config.input_size
    if batch.dim() != 4 or batch.shape[1] != 3 or batch.shape[2] != size or batch.shape[3] != size:
        raise ShapeError(f"Expected input of shape (N, 3, {size}, {size}), got {tuple(batch.shape)}")
    return b(batch)


def replace_head(b: Backbone, num_classes: int, seed: int = 0) -> Backbone:
    """Swap in a freshly initialized head; every body parameter is left untouched."""
    if num_classes < 2:
        raise ConfigError(f"A classification head needs at least 2 classes, got {num_classes}")
    head = nn.Linear(b.config.head_in_features, num_classes)
    _init_linear(head, torch.Generator().manual_seed(seed))
    b.fc = head
    b.config = dataclasses.replace(b.config, num_classes=num_classes)
    logger.info(f"Replaced classification head: {b.config.head_in_features} -> {num_classes}")
    return b


def set_trainable(b: Backbone, scope: str) -> Backbone:
    """Restrict gradient updates to the head ("head_only") or open the whole network ("all")."""
    if scope not in TRAINABLE_SCOPES:
        raise ConfigError(f"Unknown trainable scope {scope!r}; choose from {TRAINABLE_SCOPES}")
    if scope == "head_only" and not b.has_head:
        raise StateError("Cannot train head_only on a backbone without a head")
    for name, param in b.named_parameters():
        param.requires_grad_(scope == "all" or name.startswith(HEAD_PREFIX))
    b.trainable_scope = scope
    b.train(b.training)
    return b


def classify(b: Backbone, batch: torch.Tensor) -> torch.Tensor:
    """Logits from the global-average-pooled last stage."""
    if not b.has_head:
        raise StateError("Backbone has no classification head; call replace_head first")
    feats = extract_pyramid(b, batch)[2]
    if b.layer4 is not None:
        feats = b.layer4(feats)
    pooled = torch.flatten(F.adaptive_avg_pool2d(feats, 1), 1)
    return b.fc(pooled)


def deepest_side(b: Backbone, with_stage4: bool = False) -> int:
    """Spatial side of the last feature map a training pass normalizes."""
    side = b.config.input_size // 16
    if with_stage4 and b.layer4 is not None:
        side = math.ceil(side / 2)
    return side


def check_batch_norm_batches(b: Backbone, n_images: int, batch_size: int, with_stage4: bool = False) -> None:
    """Raise ConfigError when some training batch would leave BatchNorm one value per channel."""
    if deepest_side(b, with_stage4) > 1:
        return
    smallest = n_images % batch_size or batch_size
    if smallest == 1:
        raise ConfigError(
            f"{n_images} images in batches of {batch_size} leave a batch of one image on a "
            f"1x1 feature map (input_size {b.config.input_size}); change batch_size or input_size"
        )


def clone_backbone(b: Backbone) -> Backbone:
    """Independent deep copy with identical parameters, buffers and scope."""
    return copy.deepcopy(b)
