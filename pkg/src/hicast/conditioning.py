"""Conditioning pathways for the denoiser: the style embedding fed into the
timestep embedding, the time-refined content features concatenated with the
noisy latent, and the learned null tokens used by classifier-free guidance.

The feature network is a small style-family classifier trained from scratch;
once frozen it plays the role of a generic perceptual feature extractor for
style statistics, losses, and metrics.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import Image, STYLE_FAMILIES


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape [B, dim]."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float64) / half
    ).to(t.device)
    args = t.double()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class TimeEmbed(nn.Module):
    """Sinusoidal timestep embedding refined by a two-layer MLP.

    A single instance is shared by the backbone and the content encoder.
    """

    def __init__(self, dim: int = 64):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim * 4), nn.SiLU(), nn.Linear(dim * 4, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        weight = self.mlp[0].weight
        return self.mlp(timestep_embedding(t, self.dim).to(weight.dtype))


@dataclass
class ContentFeatures:
    values: torch.Tensor  # [c_content, h, w] or [B, c_content, h, w]
    timestep: int
    is_null: bool = False


@dataclass
class StyleEmbedding:
    values: torch.Tensor  # [d_emb] or [B, d_emb]
    is_null: bool = False


class FeatureNet(nn.Module):
    """Small convolutional classifier whose per-level activations double as
    perceptual features. Level 0 keeps full input resolution; each later
    level halves it."""

    def __init__(
        self,
        level_channels: tuple[int, ...] = (8, 16, 32),
        num_classes: int = len(STYLE_FAMILIES),
        seed: int | None = None,
    ):
        super().__init__()
        if len(level_channels) < 3:
            raise ValueError("feature net needs at least 3 levels")
        if seed is not None:
            torch.manual_seed(seed)
        self.level_channels = tuple(level_channels)
        blocks = []
        cin = 3
        for i, c in enumerate(self.level_channels):
            stride = 1 if i == 0 else 2
            # replicate padding keeps constant inputs spatially constant at
            # every level (feature statistics of flat images are exact)
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(cin, c, 3, stride=stride, padding=1, padding_mode="replicate"),
                    nn.GroupNorm(min(4, c), c),
                    nn.SiLU(),
                )
            )
            cin = c
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Linear(cin, num_classes)
        self.frozen = False

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Per-level activations for a [B,3,H,W] batch."""
        out = []
        h = x
        for block in self.blocks:
            h = block(h)
            out.append(h)
        return out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x)[-1]
        return self.head(h.mean(dim=(2, 3)))

    def freeze(self) -> "FeatureNet":
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        self.eval()
        return self

    @property
    def stats_dim(self) -> int:
        return 2 * sum(self.level_channels)


def train_feature_net(
    images: list[Image],
    steps: int = 400,
    seed: int = 0,
    lr: float = 2e-3,
    batch_size: int = 32,
    level_channels: tuple[int, ...] = (8, 16, 32),
) -> FeatureNet:
    """Train a style-family classifier on labeled synthetic styles, then freeze it.

    Labels come from each image's recorded style family.
    """
    labels = np.array([STYLE_FAMILIES.index(img.meta["family"]) for img in images])
    if len(np.unique(labels)) < 2:
        raise ValueError("feature-net training needs at least 2 style families")
    net = FeatureNet(level_channels, seed=seed)
    rng = np.random.default_rng(seed)
    pixels = np.stack([img.pixels for img in images])
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    loss_fn = nn.CrossEntropyLoss()
    for _ in range(steps):
        idx = rng.integers(0, len(images), size=min(batch_size, len(images)))
        x = torch.from_numpy(pixels[idx])
        y = torch.from_numpy(labels[idx])
        loss = loss_fn(net(x), y)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return net.freeze()


def classify_accuracy(net: FeatureNet, images: list[Image]) -> float:
    labels = np.array([STYLE_FAMILIES.index(img.meta["family"]) for img in images])
    with torch.no_grad():
        logits = net(torch.from_numpy(np.stack([img.pixels for img in images])))
    return float((logits.argmax(dim=1).numpy() == labels).mean())


def style_stats(image: Image | np.ndarray | torch.Tensor, net: FeatureNet) -> torch.Tensor:
    """Concatenated per-level (channel mean, channel variance) of the features.

    Layout: [mean_0, var_0, mean_1, var_1, ...]; length = 2 * sum(channels).
    Variances are population (divide by N) statistics over spatial positions.
    """
    px = image.pixels if isinstance(image, Image) else image
    if not isinstance(px, torch.Tensor):
        px = torch.from_numpy(np.ascontiguousarray(px, dtype=np.float32))
    batched = px.ndim == 4
    if not batched:
        px = px[None]
    parts = []
    for level in net.features(px):
        flat = level.flatten(2)
        parts.append(flat.mean(dim=2))
        parts.append(flat.var(dim=2, unbiased=False))
    out = torch.cat(parts, dim=1)
    return out if batched else out[0]


class StyleEmbedder(nn.Module):
    """Two-layer MLP mapping feature statistics to the timestep-embedding width,
    plus the learned null-style token used for classifier-free guidance."""

    def __init__(self, stats_dim: int, d_emb: int = 64, hidden: int | None = None, seed: int | None = None):
        super().__init__()
        if seed is not None:
            torch.manual_seed(seed)
        self.stats_dim = stats_dim
        self.d_emb = d_emb
        hidden = hidden or 2 * d_emb
        self.mlp = nn.Sequential(nn.Linear(stats_dim, hidden), nn.SiLU(), nn.Linear(hidden, d_emb))
        self.null_token = nn.Parameter(torch.randn(d_emb) * 0.02)

    def embed(self, stats: torch.Tensor) -> StyleEmbedding:
        if stats.shape[-1] != self.stats_dim:
            raise ValueError(f"expected stats of length {self.stats_dim}, got {stats.shape[-1]}")
        return StyleEmbedding(self.mlp(stats.to(self.null_token.dtype)), is_null=False)

    def null(self) -> StyleEmbedding:
        return StyleEmbedding(self.null_token, is_null=True)

    forward = embed


class ContentEncoder(nn.Module):
    """Style-removal head: FiLM-modulates the codec latent with the timestep
    embedding, then refines it with two conv blocks down to `c_content`
    channels. Also owns the learned null-content token."""

    def __init__(
        self,
        c_lat: int = 4,
        c_content: int = 3,
        d_emb: int = 64,
        hidden: int = 32,
        seed: int | None = None,
    ):
        super().__init__()
        if seed is not None:
            torch.manual_seed(seed)
        self.c_lat = c_lat
        self.c_content = c_content
        self.film = nn.Linear(d_emb, 2 * c_lat)
        self.block1 = nn.Sequential(
            nn.Conv2d(c_lat, hidden, 3, padding=1), nn.GroupNorm(4, hidden), nn.SiLU()
        )
        self.block2 = nn.Conv2d(hidden, c_content, 3, padding=1)
        self.null_token = nn.Parameter(torch.randn(c_content) * 0.02)

    def forward(self, z: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        scale, shift = self.film(temb).chunk(2, dim=-1)
        h = z * (1 + scale[:, :, None, None]) + shift[:, :, None, None]
        return self.block2(self.block1(h))

    def null_features(self, t: int, hw: tuple[int, int]) -> ContentFeatures:
        values = self.null_token[:, None, None].expand(self.c_content, *hw)
        return ContentFeatures(values, timestep=t, is_null=True)


def encode_content(
    image: Image,
    t: int,
    codec,
    content_encoder: ContentEncoder,
    time_embed: TimeEmbed,
    num_timesteps: int = 1000,
) -> ContentFeatures:
    """Time-refined content features for one image at timestep t."""
    if not 0 <= t < num_timesteps:
        raise ValueError(f"timestep {t} outside [0, {num_timesteps})")
    z = codec.encode(image).values
    with torch.no_grad():
        temb = time_embed(torch.tensor([t]))
        values = content_encoder(z[None], temb)[0]
    return ContentFeatures(values, timestep=t, is_null=False)
