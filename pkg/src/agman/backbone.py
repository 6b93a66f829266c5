"""Four-stage backbones, hierarchical F2/F3 fusion and the attribute
classification branch."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class StageDims:
    """Channel counts of the four stages and the total stride at stage 2."""
    channels: tuple[int, int, int, int]
    stage2_stride: int

    def f2_shape(self, image_size: int) -> tuple[int, int, int]:
        s = image_size // self.stage2_stride
        return (self.channels[1], s, s)

    def f3_shape(self, image_size: int) -> tuple[int, int, int]:
        s = image_size // (2 * self.stage2_stride)
        return (self.channels[2], s, s)


def _conv_block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=2, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class TinyNet(nn.Module):
    """Small four-stage CNN; every stage halves the resolution.

    Default channels 16/32/64/128, so a 64x64 input gives
    F2 = [32, 16, 16] and F3 = [64, 8, 8].
    """

    def __init__(self, channels=(16, 32, 64, 128)):
        super().__init__()
        self.dims = StageDims(tuple(channels), stage2_stride=4)
        c1, c2, c3, c4 = channels
        self.block1 = _conv_block(3, c1)
        self.block2 = _conv_block(c1, c2)
        self.block3 = _conv_block(c2, c3)
        self.block4 = _conv_block(c3, c4)

    def stages(self, x):
        f1 = self.block1(x)
        f2 = self.block2(f1)
        f3 = self.block3(f2)
        return f1, f2, f3


class ResNet50Backbone(nn.Module):
    """torchvision ResNet50 split into stem + layer1..layer4."""

    def __init__(self, weights_path: str | None = None):
        super().__init__()
        from torchvision.models import resnet50

        net = resnet50(weights=None)
        if weights_path:
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
            state = {k: v for k, v in state.items() if not k.startswith("fc.")}
            net.load_state_dict(state, strict=False)
        self.dims = StageDims((256, 512, 1024, 2048), stage2_stride=8)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.block1 = net.layer1
        self.block2 = net.layer2
        self.block3 = net.layer3
        self.block4 = net.layer4

    def stages(self, x):
        f1 = self.block1(self.stem(x))
        f2 = self.block2(f1)
        f3 = self.block3(f2)
        return f1, f2, f3


def build_backbone(profile: str, channels=None, weights_path: str | None = None) -> nn.Module:
    if profile == "tinynet":
        return TinyNet(tuple(channels) if channels else (16, 32, 64, 128))
    if profile == "resnet50":
        return ResNet50Backbone(weights_path)
    raise ValueError(f"unknown backbone profile {profile!r}; expected 'tinynet' or 'resnet50'")


class HierarchicalFusion(nn.Module):
    """F23 = avgpool2(conv1x1(F2)) + F3, then f(I) = [F23; F3].

    F2 has half F3's channels and twice its resolution, so it is projected
    with a 1x1 convolution and 2x2/stride-2 average pooling before the
    addition.
    """

    def __init__(self, c2: int, c3: int):
        super().__init__()
        self.c2, self.c3 = c2, c3
        self.proj = nn.Conv2d(c2, c3, 1, bias=False)

    def forward(self, f2, f3):
        if f2.shape[1] != self.c2 or f3.shape[1] != self.c3:
            raise ValueError(f"fusion expects F2 with {self.c2} and F3 with {self.c3} channels, "
                             f"got {f2.shape[1]} and {f3.shape[1]}")
        if f2.shape[-2] != 2 * f3.shape[-2] or f2.shape[-1] != 2 * f3.shape[-1]:
            raise ValueError(f"F2 spatial dims {tuple(f2.shape[-2:])} are not twice "
                             f"F3's {tuple(f3.shape[-2:])}")
        f23 = F.avg_pool2d(self.proj(f2), 2) + f3
        return f23, torch.cat([f23, f3], dim=1)


class ClassificationHead(nn.Module):
    """Block 4, global average pooling and an FC layer to ``n`` logits."""

    def __init__(self, block4: nn.Module, c3: int, c4: int, n: int):
        super().__init__()
        self.c3 = c3
        self.block4 = block4
        self.fc = nn.Linear(c4, n)

    def forward(self, f23):
        if f23.shape[1] != self.c3:
            raise ValueError(f"classification head expects {self.c3} channels, got {f23.shape[1]}")
        z = self.block4(f23)
        return self.fc(z.mean(dim=(2, 3)))
