"""Denoising U-Net.

Content features are concatenated with the noisy latent at the input; the
style embedding is added to the timestep embedding consumed by every residual
block; adapter pyramids are added to the encoder output of each resolution
level. Video mode inserts temporal layers (frame-axis convolutions, temporal
attention, and cross-frame spatial-temporal attention) whose output
projections start at zero, so a freshly inflated video model reproduces the
image model frame by frame.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import torch
from torch import nn

from .adapter import AdapterPyramid
from .conditioning import ContentFeatures, StyleEmbedding, TimeEmbed
from .errors import StateError


@dataclass
class BackboneConfig:
    in_channels: int = 7  # latent + content channels
    out_channels: int = 4
    level_channels: tuple[int, ...] = (32, 64)
    attention_levels: tuple[int, ...] = (1,)
    d_emb: int = 64
    temporal_enabled: bool = False
    max_frames: int = 8
    num_timesteps: int = 1000

    def __post_init__(self):
        if len(self.level_channels) < 2:
            raise ValueError("backbone needs at least 2 resolution levels")


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, d_emb: int):
        super().__init__()
        groups = min(8, cin)
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb_proj = nn.Linear(d_emb, cout)
        self.norm2 = nn.GroupNorm(min(8, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.act = nn.SiLU()
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(self.act(self.norm1(x)))
        h = h + self.emb_proj(emb)[:, :, None, None]
        h = self.conv2(self.act(self.norm2(h)))
        return self.skip(x) + h


class SelfAttention(nn.Module):
    """Single-head self-attention over spatial tokens, zero-init output."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.GroupNorm(min(8, channels), channels)
        self.qkv = nn.Linear(channels, 3 * channels)
        self.out = nn.Linear(channels, channels)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        self.scale = channels**-0.5

    def forward(self, x):
        b, c, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)  # [B, HW, C]
        q, k, v = self.qkv(tokens).chunk(3, dim=-1)
        attn = torch.softmax(q @ k.transpose(1, 2) * self.scale, dim=-1)
        out = self.out(attn @ v)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class TemporalConv(nn.Module):
    """Frame-axis 1D convolution, residual with zero-init output projection.

    Replicate padding keeps a constant-in-time sequence constant, so a static
    clip maps to identical per-frame outputs.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.GroupNorm(min(8, channels), channels)
        self.conv = nn.Conv1d(channels, channels, 3, padding=1, padding_mode="replicate")
        self.act = nn.SiLU()
        self.proj = nn.Conv1d(channels, channels, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x):
        n, c, h, w = x.shape
        seq = self.norm(x).permute(2, 3, 1, 0).reshape(h * w, c, n)
        seq = self.proj(self.act(self.conv(seq)))
        return x + seq.reshape(h, w, c, n).permute(3, 2, 0, 1)


class TemporalAttention(nn.Module):
    """Attention across frames at each spatial location, with a learned
    relative frame-position bias; zero-init output projection."""

    def __init__(self, channels: int, max_frames: int = 8):
        super().__init__()
        self.norm = nn.GroupNorm(min(8, channels), channels)
        self.qkv = nn.Linear(channels, 3 * channels)
        self.out = nn.Linear(channels, channels)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        self.rel_bias = nn.Parameter(torch.zeros(2 * max_frames - 1))
        self.max_frames = max_frames
        self.scale = channels**-0.5

    def forward(self, x):
        n, c, h, w = x.shape
        if n > self.max_frames:
            raise ValueError(f"clip of {n} frames exceeds max_frames={self.max_frames}")
        tokens = self.norm(x).permute(2, 3, 0, 1).reshape(h * w, n, c)
        q, k, v = self.qkv(tokens).chunk(3, dim=-1)
        logits = q @ k.transpose(1, 2) * self.scale  # [HW, N, N]
        idx = torch.arange(n)
        rel = idx[:, None] - idx[None, :] + self.max_frames - 1
        logits = logits + self.rel_bias[rel]
        out = self.out(torch.softmax(logits, dim=-1) @ v)
        return x + out.reshape(h, w, n, c).permute(2, 3, 0, 1)


class SpatialTemporalAttention(nn.Module):
    """Joint attention where each token queries all frames' tokens; for a
    single frame this is ordinary spatial self-attention. Zero-init output."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.GroupNorm(min(8, channels), channels)
        self.qkv = nn.Linear(channels, 3 * channels)
        self.out = nn.Linear(channels, channels)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        self.scale = channels**-0.5

    def forward(self, x):
        n, c, h, w = x.shape
        tokens = self.norm(x).permute(0, 2, 3, 1).reshape(1, n * h * w, c)
        q, k, v = self.qkv(tokens).chunk(3, dim=-1)
        attn = torch.softmax(q @ k.transpose(1, 2) * self.scale, dim=-1)
        out = self.out(attn @ v)
        return x + out.reshape(n, h, w, c).permute(0, 3, 1, 2)


class UNet(nn.Module):
    def __init__(self, config: BackboneConfig | None = None, seed: int | None = None):
        super().__init__()
        if seed is not None:
            torch.manual_seed(seed)
        self.config = config or BackboneConfig()
        cfg = self.config
        chans = cfg.level_channels
        d = cfg.d_emb

        self.time_embed = TimeEmbed(d)
        self.conv_in = nn.Conv2d(cfg.in_channels, chans[0], 3, padding=1)

        self.enc_res = nn.ModuleList()
        self.enc_attn = nn.ModuleDict()
        self.downs = nn.ModuleList()
        for i, c in enumerate(chans):
            cin = chans[i - 1] if i > 0 else chans[0]
            if i > 0:
                self.downs.append(nn.Conv2d(cin, c, 3, stride=2, padding=1))
            self.enc_res.append(ResBlock(c, c, d))
            if i in cfg.attention_levels:
                self.enc_attn[str(i)] = SelfAttention(c)

        mid_c = chans[-1]
        self.mid_res1 = ResBlock(mid_c, mid_c, d)
        self.mid_attn = SelfAttention(mid_c)
        self.mid_res2 = ResBlock(mid_c, mid_c, d)

        self.dec_res = nn.ModuleList()
        self.dec_attn = nn.ModuleDict()
        self.ups = nn.ModuleList()
        for i in reversed(range(len(chans))):
            c = chans[i]
            self.dec_res.append(ResBlock(2 * c, c, d))
            if i in cfg.attention_levels:
                self.dec_attn[str(i)] = SelfAttention(c)
            if i > 0:
                self.ups.append(
                    nn.Sequential(
                        nn.Upsample(scale_factor=2, mode="nearest"),
                        nn.Conv2d(c, chans[i - 1], 3, padding=1),
                    )
                )

        self.out_norm = nn.GroupNorm(min(8, chans[0]), chans[0])
        self.out_conv = nn.Conv2d(chans[0], cfg.out_channels, 3, padding=1)
        self.act = nn.SiLU()

        self.temporal = nn.ModuleDict()
        if cfg.temporal_enabled:
            self._build_temporal()

    def _build_temporal(self):
        cfg = self.config
        chans = cfg.level_channels
        for i, c in enumerate(chans):
            self.temporal[f"enc_res_{i}"] = TemporalConv(c)
            if i in cfg.attention_levels:
                self.temporal[f"enc_attn_{i}_st"] = SpatialTemporalAttention(c)
                self.temporal[f"enc_attn_{i}_t"] = TemporalAttention(c, cfg.max_frames)
        mid_c = chans[-1]
        self.temporal["mid_res_1"] = TemporalConv(mid_c)
        self.temporal["mid_attn_st"] = SpatialTemporalAttention(mid_c)
        self.temporal["mid_attn_t"] = TemporalAttention(mid_c, cfg.max_frames)
        self.temporal["mid_res_2"] = TemporalConv(mid_c)
        for i in reversed(range(len(chans))):
            c = chans[i]
            self.temporal[f"dec_res_{i}"] = TemporalConv(c)
            if i in cfg.attention_levels:
                self.temporal[f"dec_attn_{i}_st"] = SpatialTemporalAttention(c)
                self.temporal[f"dec_attn_{i}_t"] = TemporalAttention(c, cfg.max_frames)

    def _t(self, name: str, h: torch.Tensor, video: bool) -> torch.Tensor:
        if video and name in self.temporal:
            return self.temporal[name](h)
        return h

    def temporal_parameter_names(self) -> list[str]:
        return [n for n, _ in self.named_parameters() if n.startswith("temporal.")]

    def forward(
        self,
        x: torch.Tensor,
        emb: torch.Tensor,
        pyramid: AdapterPyramid | None = None,
        video: bool = False,
    ) -> torch.Tensor:
        """x: [B, in_channels, h, w]; emb: [B, d_emb]. In video mode the batch
        axis is the frame axis of one clip."""
        if video and not self.config.temporal_enabled:
            raise StateError("video forward requested but temporal layers are not enabled")
        cfg = self.config
        if pyramid is not None and len(pyramid) != len(cfg.level_channels):
            raise ValueError(
                f"pyramid has {len(pyramid)} levels, backbone has {len(cfg.level_channels)}"
            )

        h = self.conv_in(x)
        skips = []
        for i in range(len(cfg.level_channels)):
            if i > 0:
                h = self.downs[i - 1](h)
            h = self.enc_res[i](h, emb)
            h = self._t(f"enc_res_{i}", h, video)
            if str(i) in self.enc_attn:
                h = self.enc_attn[str(i)](h)
                h = self._t(f"enc_attn_{i}_st", h, video)
                h = self._t(f"enc_attn_{i}_t", h, video)
            if pyramid is not None:
                if pyramid.levels[i].shape[-3:] != h.shape[-3:]:
                    raise ValueError(
                        f"pyramid level {i} shape {tuple(pyramid.levels[i].shape[-3:])} "
                        f"does not match features {tuple(h.shape[-3:])}"
                    )
                h = h + pyramid.levels[i]
            skips.append(h)

        h = self.mid_res1(h, emb)
        h = self._t("mid_res_1", h, video)
        h = self.mid_attn(h)
        h = self._t("mid_attn_st", h, video)
        h = self._t("mid_attn_t", h, video)
        h = self.mid_res2(h, emb)
        h = self._t("mid_res_2", h, video)

        for j, i in enumerate(reversed(range(len(cfg.level_channels)))):
            h = self.dec_res[j](torch.cat([h, skips[i]], dim=1), emb)
            h = self._t(f"dec_res_{i}", h, video)
            if str(i) in self.dec_attn:
                h = self.dec_attn[str(i)](h)
                h = self._t(f"dec_attn_{i}_st", h, video)
                h = self._t(f"dec_attn_{i}_t", h, video)
            if i > 0:
                h = self.ups[j](h)

        return self.out_conv(self.act(self.out_norm(h)))


def _conditioned_input(
    z_t: torch.Tensor, f_c: ContentFeatures, f_s: StyleEmbedding, t: int, unet: UNet
) -> tuple[torch.Tensor, torch.Tensor]:
    z = z_t if z_t.ndim == 4 else z_t[None]
    fc = f_c.values if f_c.values.ndim == 4 else f_c.values[None].expand(z.shape[0], -1, -1, -1)
    if fc.shape[-2:] != z.shape[-2:]:
        raise ValueError(f"content features {tuple(fc.shape[-2:])} vs latent {tuple(z.shape[-2:])}")
    if torch.isnan(z).any() or torch.isnan(fc).any():
        raise FloatingPointError("NaN in denoiser inputs")
    if not 0 <= t < unet.config.num_timesteps:
        raise ValueError(f"timestep {t} outside [0, {unet.config.num_timesteps})")
    temb = unet.time_embed(torch.full((z.shape[0],), t, dtype=torch.long))
    fs = f_s.values if f_s.values.ndim == 2 else f_s.values[None].expand(z.shape[0], -1)
    return torch.cat([z, fc], dim=1), temb + fs


def predict_noise(
    unet: UNet,
    z_t: torch.Tensor,
    f_c: ContentFeatures,
    f_s: StyleEmbedding,
    t: int,
    pyramid: AdapterPyramid | None = None,
) -> torch.Tensor:
    """Noise estimate for one latent [c,h,w] under the given conditions."""
    x, emb = _conditioned_input(z_t, f_c, f_s, t, unet)
    out = unet(x, emb, pyramid=pyramid)
    return out if z_t.ndim == 4 else out[0]


def predict_noise_video(
    unet: UNet,
    z_t: torch.Tensor,
    f_c: ContentFeatures,
    f_s: StyleEmbedding,
    t: int,
    pyramid: AdapterPyramid | None = None,
) -> torch.Tensor:
    """Noise estimate for a clip [N,c,h,w]; frames interact via temporal layers."""
    if not unet.config.temporal_enabled:
        raise StateError("this backbone has no temporal layers; inflate it first")
    if z_t.ndim != 4 or z_t.shape[0] < 1:
        raise ValueError("video latents must be [N, c, h, w] with N >= 1")
    x, emb = _conditioned_input(z_t, f_c, f_s, t, unet)
    return unet(x, emb, pyramid=pyramid, video=True)


def inflate_from_image_model(image_unet: UNet, max_frames: int = 8, seed: int = 0) -> UNet:
    """Build a video backbone from a trained image backbone.

    Spatial parameters are copied and frozen; the inserted temporal layers
    (zero-init output projections) are the only trainable parameters, so the
    fresh model equals the image model on every frame.
    """
    if image_unet.config.temporal_enabled:
        raise ValueError("expected an image-mode backbone, got one with temporal layers")
    cfg = dataclasses.replace(image_unet.config, temporal_enabled=True, max_frames=max_frames)
    video = UNet(cfg, seed=seed)
    video.load_state_dict(image_unet.state_dict(), strict=False)
    for name, p in video.named_parameters():
        p.requires_grad_(name.startswith("temporal."))
    return video
