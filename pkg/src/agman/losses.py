"""Attribute classification loss, cosine triplet loss and the learned
weighting that combines them."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


class DegenerateInputError(ValueError):
    """A zero-norm vector was passed where a direction is required."""


def classification_loss(logits: torch.Tensor, target: torch.Tensor,
                        weights: torch.Tensor | None = None) -> torch.Tensor:
    """Weighted binary cross-entropy averaged over the last axis (and batch).

    Uses ``-log sigmoid(x) = softplus(-x)`` so saturated logits stay finite.
    """
    logits = torch.as_tensor(logits)
    target = torch.as_tensor(target, dtype=logits.dtype)
    if logits.shape != target.shape:
        raise ValueError(f"logits {list(logits.shape)} and target {list(target.shape)} differ in shape")
    per = target * F.softplus(-logits) + (1 - target) * F.softplus(logits)
    if weights is not None:
        weights = torch.as_tensor(weights, dtype=logits.dtype)
        if weights.shape[-1] != logits.shape[-1]:
            raise ValueError(f"{weights.shape[-1]} class weights for {logits.shape[-1]} logits")
        per = per * weights
    return per.mean()


def cosine_similarity(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Cosine of the angle between ``u`` and ``v`` along the last axis."""
    u = torch.as_tensor(u)
    v = torch.as_tensor(v, dtype=u.dtype)
    nu = torch.linalg.vector_norm(u, dim=-1)
    nv = torch.linalg.vector_norm(v, dim=-1)
    if (nu == 0).any() or (nv == 0).any():
        raise DegenerateInputError("cosine similarity of a zero-norm vector is undefined")
    return (u * v).sum(-1) / (nu * nv)


def triplet_loss(anchor, positive, negative, margin: float = 0.2,
                 mode: str = "similarity_corrected", reduce: bool = True) -> torch.Tensor:
    """Hinge on cosine similarities s_p = cos(a, p), s_n = cos(a, n).

    ``similarity_corrected``: max(0, m - s_p + s_n), i.e. the hinge on cosine
    distance 1 - cos. ``as_written``: max(0, m + s_p - s_n), the literal
    similarity form, kept for comparison runs.
    """
    s_p = cosine_similarity(anchor, positive)
    s_n = cosine_similarity(anchor, negative)
    if mode == "similarity_corrected":
        loss = torch.clamp(margin - s_p + s_n, min=0)
    elif mode == "as_written":
        loss = torch.clamp(margin + s_p - s_n, min=0)
    else:
        raise ValueError(f"unknown triplet mode {mode!r}")
    return loss.mean() if reduce else loss


def combined_loss(l_cls, l_trip, w0, w1, clamp: float = 10.0):
    """0.5 e^{w0} L_c + w0 + 0.5 e^{w1} L_t + w1 with w clamped to [-clamp, clamp].

    The derivative in each w is 0.5 e^{w} L + 1 > 0, so gradient descent
    pushes both weights down until the clamp holds them.
    """
    dtype = next((t.dtype for t in (l_cls, l_trip, w0, w1) if torch.is_tensor(t)), torch.float64)
    l_cls, l_trip = torch.as_tensor(l_cls, dtype=dtype), torch.as_tensor(l_trip, dtype=dtype)
    w0 = torch.clamp(torch.as_tensor(w0, dtype=dtype), -clamp, clamp)
    w1 = torch.clamp(torch.as_tensor(w1, dtype=dtype), -clamp, clamp)
    return 0.5 * torch.exp(w0) * l_cls + w0 + 0.5 * torch.exp(w1) * l_trip + w1


@dataclass
class LossWeights:
    w0: float = 0.0
    w1: float = 0.0


class DynamicWeighting(nn.Module):
    """Holds the two learned loss weights, both initialised at zero."""

    def __init__(self, clamp: float = 10.0, freeze_w0: bool = False):
        super().__init__()
        self.clamp = clamp
        self.w0 = nn.Parameter(torch.zeros(()), requires_grad=not freeze_w0)
        self.w1 = nn.Parameter(torch.zeros(()))

    def forward(self, l_cls, l_trip):
        return combined_loss(l_cls, l_trip, self.w0, self.w1, self.clamp)

    @torch.no_grad()
    def clamp_(self):
        self.w0.clamp_(-self.clamp, self.clamp)
        self.w1.clamp_(-self.clamp, self.clamp)

    def values(self) -> LossWeights:
        return LossWeights(self.w0.item(), self.w1.item())
