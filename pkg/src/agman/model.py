"""The full network: backbone -> fusion -> AGA embedding, plus the
classification branch on the fused map."""
from __future__ import annotations

import torch
import torch.nn as nn

from .attention import AGA, AttentionTrace
from .backbone import ClassificationHead, HierarchicalFusion, build_backbone
from .config import RunConfig
from .data import AttributeSpace


class AGMAN(nn.Module):
    def __init__(self, config: RunConfig, space: AttributeSpace):
        super().__init__()
        m = config.model
        self.space = space
        self.image_size = config.image_size
        self.enable_fusion = m.enable_fusion
        self.backbone = build_backbone(m.profile, m.channels, m.pretrained)
        c1, c2, c3, c4 = self.backbone.dims.channels
        self.f2_shape = self.backbone.dims.f2_shape(self.image_size)
        self.f3_shape = self.backbone.dims.f3_shape(self.image_size)
        _, h, w = self.f3_shape
        if h < 1:
            raise ValueError(f"image size {self.image_size} is too small for profile {m.profile!r}")
        self.fusion = HierarchicalFusion(c2, c3)
        self.head = ClassificationHead(self.backbone.block4, c3, c4, space.n)
        self.aga = AGA(
            2 * c3 if m.enable_fusion else c3, config.embedding_size, config.c_prime, space.n, h, w,
            config.ca_reduction, m.aca_hidden,
            enable_asa=m.enable_asa, enable_sa=m.enable_sa, enable_aca=m.enable_aca, enable_ca=m.enable_ca,
        )
        self.register_buffer("pixel_mean", torch.tensor(config.pixel_mean).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("pixel_std", torch.tensor(config.pixel_std).view(1, 3, 1, 1), persistent=False)

    def extract_stages(self, images: torch.Tensor):
        """Return (F2, F3) for a batch of [B, 3, S, S] images in [0, 1]."""
        s = self.image_size
        if images.dim() != 4 or tuple(images.shape[1:]) != (3, s, s):
            raise ValueError(f"expected images of shape [B, 3, {s}, {s}], got {list(images.shape)}")
        if not torch.isfinite(images).all():
            raise ValueError("images contain non-finite values")
        x = (images - self.pixel_mean.to(images.dtype)) / self.pixel_std.to(images.dtype)
        _, f2, f3 = self.backbone.stages(x)
        return f2, f3

    def one_hot(self, attributes: torch.Tensor, dtype=torch.float32) -> torch.Tensor:
        attributes = torch.as_tensor(attributes, dtype=torch.long).reshape(-1)
        if ((attributes < 0) | (attributes >= self.space.n)).any():
            bad = attributes[(attributes < 0) | (attributes >= self.space.n)][0].item()
            raise IndexError(f"attribute index {bad} out of range for n={self.space.n}")
        return torch.nn.functional.one_hot(attributes, self.space.n).to(dtype)

    def forward(self, images, attributes, with_logits=True):
        """Embed ``images`` under ``attributes`` (indices [B]).

        Returns (embeddings [B, c], logits [B, n] or None, trace).
        """
        f2, f3 = self.extract_stages(images)
        if self.enable_fusion:
            f23, f_img = self.fusion(f2, f3)
        else:
            f23, f_img = f3, f3
        a = self.one_hot(attributes, images.dtype)
        emb, _, trace = self.aga(f_img, a)
        logits = self.head(f23) if with_logits else None
        return emb, logits, trace

    @torch.no_grad()
    def embed(self, image: torch.Tensor, attribute: int) -> tuple[torch.Tensor, AttentionTrace]:
        """Embedding vector and attention trace for one [3, S, S] image."""
        was_training = self.training
        self.eval()
        try:
            emb, _, trace = self(image.unsqueeze(0), torch.tensor([attribute]), with_logits=False)
        finally:
            self.train(was_training)
        return emb[0], trace[0]

    @torch.no_grad()
    def embed_many(self, images: torch.Tensor, attribute: int, batch_size: int = 64) -> torch.Tensor:
        was_training = self.training
        self.eval()
        try:
            out = []
            for i in range(0, len(images), batch_size):
                chunk = images[i:i + batch_size]
                attrs = torch.full((len(chunk),), attribute, dtype=torch.long)
                out.append(self(chunk, attrs, with_logits=False)[0])
        finally:
            self.train(was_training)
        if not out:
            return torch.zeros(0, self.aga.project.out_channels)
        return torch.cat(out)


def build_model(config: RunConfig, space: AttributeSpace, seed: int | None = None) -> AGMAN:
    """Construct a freshly initialised model; initialisation is seeded."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed if seed is None else seed)
        model = AGMAN(config, space)
    return model
