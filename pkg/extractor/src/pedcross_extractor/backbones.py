"""Backbone construction: classification CNNs with the classifier cut off,
features taken at the average-pool layer (its input for raw layout, its
output for pooled layout)."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
from torchvision import models

BACKBONES = {
    "resnet18": (models.resnet18, 512),
    "resnet34": (models.resnet34, 512),
    "resnet50": (models.resnet50, 2048),
    "resnet101": (models.resnet101, 2048),
    "resnet152": (models.resnet152, 2048),
    "resnext50": (models.resnext50_32x4d, 2048),
    "resnext101": (models.resnext101_32x8d, 2048),
}

LAYOUT_POOLED = "pooled"
LAYOUT_RAW = "raw"


@dataclass
class ExtractorSpec:
    backbone: str = "resnet50"
    layout: str = LAYOUT_POOLED
    pretrained: bool = True
    #: seed used only when pretrained weights are disabled (testing)
    seed: int = 0

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(
                f"unknown backbone '{self.backbone}'; choose from {sorted(BACKBONES)}"
            )
        if self.layout not in (LAYOUT_POOLED, LAYOUT_RAW):
            raise ValueError(f"unknown layout '{self.layout}'")

    @property
    def channels(self) -> int:
        return BACKBONES[self.backbone][1]

    @property
    def row_len(self) -> int:
        return self.channels if self.layout == LAYOUT_POOLED else self.channels * 49


class FeatureBackbone(nn.Module):
    """Trunk up to (and optionally through) the average-pool layer."""

    def __init__(self, spec: ExtractorSpec):
        super().__init__()
        factory, _ = BACKBONES[spec.backbone]
        if spec.pretrained:
            net = factory(weights="IMAGENET1K_V1")
        else:
            torch.manual_seed(spec.seed)
            net = factory(weights=None)
        # everything before avgpool yields the (C, 7, 7) map for 224 inputs
        self.trunk = nn.Sequential(*list(net.children())[:-2])
        self.pool = net.avgpool
        self.spec = spec
        self.eval()

    @torch.no_grad()
    def forward(self, batch: torch.Tensor) -> torch.Tensor:
        fmap = self.trunk(batch)
        if self.spec.layout == LAYOUT_RAW:
            return fmap.flatten(start_dim=1)
        return self.pool(fmap).flatten(start_dim=1)

    @torch.no_grad()
    def feature_map(self, batch: torch.Tensor) -> torch.Tensor:
        return self.trunk(batch)
