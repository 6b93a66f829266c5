"""Attribute-guided attention: ASA -> SA -> ACA -> CA.

All modules work on batches: feature maps are ``[B, c, h, w]`` and
attributes are one-hot ``[B, n]``. Each stage returns the attended map and
the attention weights it applied.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


def _fan_in_uniform_(weight: torch.Tensor, fan_in: int) -> None:
    bound = 1.0 / math.sqrt(fan_in)
    nn.init.uniform_(weight, -bound, bound)


def _check_one_hot(a: torch.Tensor, n: int) -> None:
    if a.dim() != 2 or a.shape[1] != n:
        raise ValueError(f"attribute must be one-hot of shape [B, {n}], got {list(a.shape)}")
    ok = ((a == 0) | (a == 1)).all() and (a.sum(dim=1) == 1).all()
    if not ok:
        raise ValueError("attribute vector is not one-hot")


def _gated_embedding(matrix: nn.Linear, a: torch.Tensor) -> torch.Tensor:
    z = matrix(a)
    return torch.sigmoid(z) * z


class AttributeSpatialAttention(nn.Module):
    """f_s = f(I) * (W1 . softmax_hw(<tanh(conv(f(I))), p(a)>)), p(a) = sigmoid(Wa a) * Wa a."""

    def __init__(self, c: int, c_prime: int, n: int, h: int, w: int):
        super().__init__()
        self.n = n
        self.conv = nn.Conv2d(c, c_prime, 1, bias=False)
        self.attr = nn.Linear(n, c_prime, bias=False)
        self.gain = nn.Parameter(torch.ones(h, w))
        _fan_in_uniform_(self.conv.weight, c)
        _fan_in_uniform_(self.attr.weight, n)

    def forward(self, f, a):
        _check_one_hot(a, self.n)
        if f.shape[-2:] != self.gain.shape:
            raise ValueError(f"ASA built for {tuple(self.gain.shape)} maps, got {tuple(f.shape[-2:])}")
        p_img = torch.tanh(self.conv(f))                       # [B, c', h, w]
        p_attr = _gated_embedding(self.attr, a)                # [B, c']
        logits = torch.einsum("bchw,bc->bhw", p_img, p_attr)
        b, h, w = logits.shape
        soft = torch.softmax(logits.reshape(b, h * w), dim=1).reshape(b, h, w)
        weight = soft * self.gain
        return f * weight.unsqueeze(1), soft


class SpatialAttention(nn.Module):
    """Gate from a 1x1 conv over channelwise [mean, max] maps."""

    def __init__(self):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, 1, bias=True)
        _fan_in_uniform_(self.conv.weight, 2)
        nn.init.zeros_(self.conv.bias)

    def forward(self, f):
        pooled = torch.cat([f.mean(dim=1, keepdim=True), f.amax(dim=1, keepdim=True)], dim=1)
        gate = torch.sigmoid(self.conv(pooled))                # [B, 1, h, w]
        return f * gate, gate.squeeze(1)


class AttributeChannelAttention(nn.Module):
    """Channel gate from [q(a), GAP(f)] through FC -> ReLU -> FC -> sigmoid,
    scaled by a learned per-channel gain."""

    def __init__(self, c: int, n: int, hidden: int | None = None):
        super().__init__()
        self.n = n
        hidden = hidden or max(1, c // 2)
        self.attr = nn.Linear(n, c, bias=False)
        self.fc1 = nn.Linear(2 * c, hidden, bias=False)
        self.fc2 = nn.Linear(hidden, c, bias=False)
        self.gain = nn.Parameter(torch.ones(c))
        _fan_in_uniform_(self.attr.weight, n)
        _fan_in_uniform_(self.fc1.weight, 2 * c)
        _fan_in_uniform_(self.fc2.weight, hidden)

    def forward(self, f, a):
        _check_one_hot(a, self.n)
        q = _gated_embedding(self.attr, a)
        z = torch.cat([q, f.mean(dim=(2, 3))], dim=1)
        gate = torch.sigmoid(self.fc2(F.relu(self.fc1(z))))
        return f * (self.gain * gate)[:, :, None, None], gate


class ChannelAttention(nn.Module):
    """Squeeze-and-excitation gate: GAP -> FC(c/r) -> ReLU -> FC(c) -> sigmoid."""

    def __init__(self, c: int, reduction: int):
        super().__init__()
        if reduction < 1 or c % reduction:
            raise ValueError(f"channel reduction ratio {reduction} does not divide {c} channels")
        self.reduce = nn.Linear(c, c // reduction, bias=False)
        self.expand = nn.Linear(c // reduction, c, bias=False)
        _fan_in_uniform_(self.reduce.weight, c)
        _fan_in_uniform_(self.expand.weight, c // reduction)

    def forward(self, f):
        gate = torch.sigmoid(self.expand(F.relu(self.reduce(f.mean(dim=(2, 3))))))
        return f * gate[:, :, None, None], gate


@dataclass
class AttentionTrace:
    """Per-sample attention weights; a field is None when its stage is disabled."""
    spatial_softmax_map: torch.Tensor | None  # [B, h, w]
    sa_gate: torch.Tensor | None              # [B, h, w]
    aca_gate: torch.Tensor | None             # [B, c]
    ca_gate: torch.Tensor | None              # [B, c]

    def __getitem__(self, i: int) -> "AttentionTrace":
        pick = lambda t: None if t is None else t[i]  # noqa: E731
        return AttentionTrace(pick(self.spatial_softmax_map), pick(self.sa_gate),
                              pick(self.aca_gate), pick(self.ca_gate))


class AGA(nn.Module):
    """Input projection, the four attention stages and global average pooling.

    Disabled stages are identity maps. ``forward`` returns the pooled
    embedding, the final feature map and the trace.
    """

    def __init__(self, in_channels: int, c: int, c_prime: int, n: int, h: int, w: int,
                 ca_reduction: int, aca_hidden: int | None = None,
                 enable_asa=True, enable_sa=True, enable_aca=True, enable_ca=True):
        super().__init__()
        self.project = nn.Conv2d(in_channels, c, 1, bias=False)
        _fan_in_uniform_(self.project.weight, in_channels)
        self.asa = AttributeSpatialAttention(c, c_prime, n, h, w) if enable_asa else None
        self.sa = SpatialAttention() if enable_sa else None
        self.aca = AttributeChannelAttention(c, n, aca_hidden) if enable_aca else None
        self.ca = ChannelAttention(c, ca_reduction) if enable_ca else None

    def forward(self, f, a):
        x = self.project(f)
        soft = sa = aca = ca = None
        if self.asa is not None:
            x, soft = self.asa(x, a)
        if self.sa is not None:
            x, sa = self.sa(x)
        if self.aca is not None:
            x, aca = self.aca(x, a)
        if self.ca is not None:
            x, ca = self.ca(x)
        return x.mean(dim=(2, 3)), x, AttentionTrace(soft, sa, aca, ca)
