"""Convolutional autoencoder providing the reduced latent space for diffusion.

Encoding is deterministic (posterior mean only). After training, latents are
divided by a recorded corpus-wide std so diffusion sees roughly unit scale;
`decode` undoes the scaling. Output pixels pass through tanh, which keeps
them in [-1, 1] while staying differentiable for the style/adversarial path.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import Image
from .errors import StateError


@dataclass
class CodecConfig:
    downsample_factor: int = 4
    latent_channels: int = 4
    base_channels: int = 32

    def __post_init__(self):
        if self.downsample_factor not in (2, 4, 8):
            raise ValueError(f"downsample_factor must be 2, 4 or 8, got {self.downsample_factor}")
        if self.latent_channels < 1:
            raise ValueError("latent_channels must be >= 1")


@dataclass
class Latent:
    values: torch.Tensor  # [latent_channels, H/f, W/f]
    source_size: tuple[int, int]


def _block(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        nn.GroupNorm(min(8, cout), cout),
        nn.SiLU(),
    )


class Autoencoder(nn.Module):
    def __init__(self, config: CodecConfig | None = None, seed: int | None = None):
        super().__init__()
        if seed is not None:
            torch.manual_seed(seed)
        self.config = config or CodecConfig()
        c = self.config.base_channels
        n_down = int(np.log2(self.config.downsample_factor))

        enc = [_block(3, c)]
        ch = c
        for _ in range(n_down):
            enc.append(_block(ch, ch * 2, stride=2))
            ch *= 2
        enc.append(nn.Conv2d(ch, self.config.latent_channels, 1))
        self.encoder = nn.Sequential(*enc)

        dec = [_block(self.config.latent_channels, ch)]
        for _ in range(n_down):
            dec.append(nn.Upsample(scale_factor=2, mode="nearest"))
            dec.append(_block(ch, ch // 2))
            ch //= 2
        dec.append(nn.Conv2d(ch, 3, 3, padding=1))
        self.decoder = nn.Sequential(*dec)

        self.register_buffer("latent_scale", torch.tensor(1.0))
        self.register_buffer("trained_flag", torch.tensor(0.0))

    @property
    def trained(self) -> bool:
        return bool(self.trained_flag.item() > 0.5)

    def encode_tensor(self, x: torch.Tensor) -> torch.Tensor:
        """Batched differentiable encode [B,3,H,W] -> scaled latent [B,c,h,w]."""
        return self.encoder(x) / self.latent_scale

    def decode_tensor(self, z: torch.Tensor) -> torch.Tensor:
        """Batched differentiable decode of scaled latents, output in [-1,1]."""
        return torch.tanh(self.decoder(z * self.latent_scale))

    def _check_ready(self, size: int) -> None:
        if not self.trained:
            raise StateError("codec is untrained; run train_codec or load a checkpoint")
        if size % self.config.downsample_factor != 0:
            raise ValueError(
                f"image size {size} not divisible by factor {self.config.downsample_factor}"
            )

    @torch.no_grad()
    def encode(self, image: Image | np.ndarray) -> Latent:
        px = image.pixels if isinstance(image, Image) else image
        self._check_ready(px.shape[-1])
        x = torch.from_numpy(np.ascontiguousarray(px, dtype=np.float32))
        z = self.encode_tensor(x[None])[0]
        return Latent(z, (px.shape[-2], px.shape[-1]))

    @torch.no_grad()
    def decode(self, latent: Latent) -> np.ndarray:
        if not self.trained:
            raise StateError("codec is untrained; run train_codec or load a checkpoint")
        x = self.decode_tensor(latent.values[None])[0]
        return x.numpy()


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 2.0) -> float:
    """PSNR in dB; `peak` defaults to the [-1,1] data range."""
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * float(np.log10(peak * peak / mse))


def train_codec(
    codec: Autoencoder,
    dataset,
    steps: int,
    lr: float = 3e-3,
    seed: int = 0,
    batch_size: int = 16,
    latent_reg: float = 1e-6,
) -> dict:
    """Minimize L2 reconstruction plus a small squared-norm latent penalty.

    Uses cosine learning-rate decay and random flips for generalization.
    Deterministic given the seed. Marks the codec trained and records the
    corpus latent std used to normalize latents for diffusion.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train the codec on an empty dataset")
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(codec.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(steps, 1), eta_min=lr / 15)
    pixels = np.stack([dataset[i].pixels for i in range(len(dataset))])
    first_loss = last_loss = None
    codec.train()
    for _ in range(steps):
        idx = rng.integers(0, len(dataset), size=min(batch_size, len(dataset)))
        flips = rng.integers(0, 4, size=len(idx))
        batch = np.stack(
            [
                b if f == 0 else b[:, ::-1] if f == 1 else b[:, :, ::-1] if f == 2 else b[:, ::-1, ::-1]
                for b, f in zip(pixels[idx], flips)
            ]
        ).copy()
        batch = torch.from_numpy(batch)
        z = codec.encoder(batch)
        recon = torch.tanh(codec.decoder(z))
        loss = ((recon - batch) ** 2).mean() + latent_reg * (z**2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        last_loss = float(loss.detach())
        if first_loss is None:
            first_loss = last_loss
    codec.eval()
    with torch.no_grad():
        sample = torch.from_numpy(pixels[: min(len(dataset), 64)])
        z = codec.encoder(sample)
        scale = float(z.std().item())
        codec.latent_scale.fill_(scale if steps > 0 and scale > 1e-6 else 1.0)
        codec.trained_flag.fill_(1.0)
    return {"first_loss": first_loss, "final_loss": last_loss, "latent_scale": float(codec.latent_scale)}
