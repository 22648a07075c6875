"""Training objectives: noise-regression content loss, feature-statistics
style loss, whole-image and patch co-occurrence adversarial losses, and the
harmonious consistency loss (global noise terms plus a patchwise contrastive
local term) used for temporal fine-tuning.

All L2 norms are root-mean-square normalized by element count so the default
loss weights stay meaningful across resolutions; `LossWeights.squared`
switches to plain mean-squared form for experimentation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .conditioning import FeatureNet

_PATCH = 8  # patch side and anchor stride, pixels
_NUM_NONLOCAL = 8
_PROB_EPS = 1e-7  # keeps log() finite on saturated discriminators


@dataclass
class LossWeights:
    lambda_c: float = 2.0
    lambda_s: float = 4.0
    lambda_g: float = 1.0
    lambda_pg: float = 2.0
    lambda_hg1: float = 0.01
    lambda_hg2: float = 2.0
    lambda_hl: float = 1.0
    tau: float = 0.07
    squared: bool = False

    def __post_init__(self):
        for name in ("lambda_c", "lambda_s", "lambda_g", "lambda_pg", "lambda_hg1", "lambda_hg2", "lambda_hl"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")


def _safe_sqrt(x: torch.Tensor) -> torch.Tensor:
    """sqrt with an exact zero at 0 and a finite (zero) gradient there.

    Plain sqrt has an infinite derivative at 0, which matters here: the
    temporal stage starts with the video model exactly equal to its image
    baseline, so the baseline-matching term begins at exactly 0.
    """
    mask = x.detach() > 0
    return torch.where(mask, torch.sqrt(x.clamp_min(1e-24)), x * 0.0)


def _rms_norm(diff: torch.Tensor, squared: bool) -> torch.Tensor:
    ms = (diff**2).mean()
    return ms if squared else _safe_sqrt(ms)


def _l2_norm(diff: torch.Tensor, squared: bool) -> torch.Tensor:
    """Plain (unnormalized) Euclidean norm.

    Used for the global terms of the harmonious consistency loss: their
    weights must balance the local part, which is an unnormalized sum over
    patch anchors; RMS-normalizing only the norms would shrink the baseline
    anchor by sqrt(numel) and let the local part dominate the objective.
    """
    s = (diff**2).sum()
    return s if squared else _safe_sqrt(s)


def content_loss(eps: torch.Tensor, eps_hat: torch.Tensor, weights: LossWeights | None = None) -> torch.Tensor:
    """Noise-estimate regression: lambda_c * RMS(eps - eps_hat)."""
    w = weights or LossWeights()
    if eps.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch {tuple(eps.shape)} vs {tuple(eps_hat.shape)}")
    return w.lambda_c * _rms_norm(eps - eps_hat, w.squared)


def _feature_stats(feats: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    flat = feats.flatten(2)
    mean = flat.mean(dim=2)
    std = torch.sqrt(flat.var(dim=2, unbiased=False) + 1e-12)
    return mean, std


def style_loss(
    out_images: torch.Tensor,
    style_images: torch.Tensor,
    net: FeatureNet,
    weights: LossWeights | None = None,
) -> torch.Tensor:
    """Match per-level channel mean and std of the frozen feature net.

    Inputs are [3,H,W] or [B,3,H,W] in [-1,1]; the batch mean is returned.
    """
    w = weights or LossWeights()
    if out_images.ndim == 3:
        out_images, style_images = out_images[None], style_images[None]
    total = 0.0
    for f_out, f_sty in zip(net.features(out_images), net.features(style_images)):
        mu_o, sd_o = _feature_stats(f_out)
        mu_s, sd_s = _feature_stats(f_sty)
        if w.squared:
            per_example = ((mu_o - mu_s) ** 2).mean(dim=1) + ((sd_o - sd_s) ** 2).mean(dim=1)
        else:
            per_example = _safe_sqrt(((mu_o - mu_s) ** 2).mean(dim=1)) + _safe_sqrt(
                ((sd_o - sd_s) ** 2).mean(dim=1)
            )
        total = total + per_example.mean()
    return w.lambda_s * total


class Discriminator(nn.Module):
    """Whole-image discriminator; sigmoid probability output."""

    def __init__(self, channels: int = 32, seed: int | None = None):
        super().__init__()
        if seed is not None:
            torch.manual_seed(seed)
        self.net = nn.Sequential(
            nn.Conv2d(3, channels, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(channels, channels * 2, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(channels * 2, channels * 2, 3, stride=2, padding=1),
            nn.SiLU(),
        )
        self.head = nn.Linear(channels * 2, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.net(x).mean(dim=(2, 3))
        return torch.sigmoid(self.head(h)).squeeze(-1)


class PatchDiscriminator(nn.Module):
    """Co-occurrence discriminator: does one crop match a set of reference
    style crops? Crops are encoded separately; the references are averaged."""

    def __init__(self, channels: int = 24, seed: int | None = None):
        super().__init__()
        if seed is not None:
            torch.manual_seed(seed)
        self.encoder = nn.Sequential(
            nn.Conv2d(3, channels, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(channels, channels * 2, 3, padding=1),
            nn.SiLU(),
        )
        self.head = nn.Sequential(
            nn.Linear(channels * 4, channels * 2), nn.SiLU(), nn.Linear(channels * 2, 1)
        )

    def _encode(self, crops: torch.Tensor) -> torch.Tensor:
        return self.encoder(crops).mean(dim=(2, 3))

    def forward(self, crop: torch.Tensor, ref_crops: torch.Tensor) -> torch.Tensor:
        """crop: [B,3,h,w]; ref_crops: [B,R,3,h,w] -> probability [B]."""
        b, r = ref_crops.shape[:2]
        ref = self._encode(ref_crops.flatten(0, 1)).reshape(b, r, -1).mean(dim=1)
        h = torch.cat([self._encode(crop), ref], dim=1)
        return torch.sigmoid(self.head(h)).squeeze(-1)


def _random_crops(images: torch.Tensor, crop: int, count: int, rng: np.random.Generator) -> torch.Tensor:
    """count uniform-random crop windows per image -> [B, count, 3, crop, crop]."""
    b, _, h, w = images.shape
    out = []
    for i in range(b):
        rows = []
        for _ in range(count):
            y = int(rng.integers(0, h - crop + 1))
            x = int(rng.integers(0, w - crop + 1))
            rows.append(images[i, :, y : y + crop, x : x + crop])
        out.append(torch.stack(rows))
    return torch.stack(out)


def _safe_log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p.clamp(_PROB_EPS, 1.0 - _PROB_EPS))


def gan_losses(
    out_images: torch.Tensor,
    style_images: torch.Tensor,
    d_ori: Discriminator,
    d_patch: PatchDiscriminator,
    rng: np.random.Generator,
    weights: LossWeights | None = None,
    num_ref_crops: int = 4,
) -> dict[str, torch.Tensor]:
    """Generator and discriminator objectives for both discriminators.

    Generator terms keep the signs of their defining formulas (the base term
    includes a constant log D(real) offset and can be negative); discriminator
    terms are the standard binary cross-entropies. Crops are H/4 x W/4 windows
    drawn from the seeded step RNG.
    """
    w = weights or LossWeights()
    if out_images.ndim == 3:
        out_images, style_images = out_images[None], style_images[None]
    h = out_images.shape[-1]
    crop = h // 4
    if crop < 1:
        raise ValueError(f"image of size {h} is smaller than its {h}/4 crop window")

    p_real = d_ori(style_images)
    p_fake = d_ori(out_images)
    g_loss = w.lambda_g * (_safe_log(p_real).mean() + (1.0 - _safe_log(p_fake)).mean())
    d_loss = -_safe_log(d_ori(style_images)).mean() - torch.log(
        (1.0 - d_ori(out_images.detach())).clamp(_PROB_EPS, 1.0)
    ).mean()

    fake_crops = _random_crops(out_images, crop, 1, rng)[:, 0]
    ref_crops = _random_crops(style_images, crop, num_ref_crops, rng)
    real_crops = _random_crops(style_images, crop, 1, rng)[:, 0]

    patch_g = w.lambda_pg * (-_safe_log(d_patch(fake_crops, ref_crops))).mean()
    patch_d = -_safe_log(d_patch(real_crops, ref_crops)).mean() - torch.log(
        (1.0 - d_patch(fake_crops.detach(), ref_crops.detach())).clamp(_PROB_EPS, 1.0)
    ).mean()
    return {"g": g_loss, "d": d_loss, "patch_g": patch_g, "patch_d": patch_d}


@dataclass
class PatchSet:
    """Unit-normalized anchor, positive, and exactly 16 negative vectors."""

    anchor: torch.Tensor
    positive: torch.Tensor
    negatives: torch.Tensor  # [16, D]

    def __post_init__(self):
        if self.negatives.shape[0] != 16:
            raise ValueError(f"a patch set needs exactly 16 negatives, got {self.negatives.shape[0]}")
        for name, vec in (("anchor", self.anchor), ("positive", self.positive)):
            if abs(float(vec.detach().norm()) - 1.0) > 1e-4:
                raise ValueError(f"{name} vector is not unit-normalized")
        norms = self.negatives.detach().norm(dim=1)
        if float((norms - 1.0).abs().max()) > 1e-4:
            raise ValueError("negative vectors are not unit-normalized")


def patch_contrastive(ps: PatchSet, tau: float = 0.07) -> torch.Tensor:
    """Cross-entropy of the anchor against 1 positive and 16 negatives.

    Negative similarities are sorted before the log-sum-exp so the value is
    exactly invariant to permuting the negatives.
    """
    pos = (ps.anchor * ps.positive).sum() / tau
    negs = torch.sort((ps.negatives @ ps.anchor) / tau).values
    logits = torch.cat([pos[None], negs])
    return torch.logsumexp(logits, dim=0) - pos


def _pooled_unit_features(frame: torch.Tensor, net: FeatureNet) -> torch.Tensor:
    """Stride-1 average pooling of level-1 activations over PATCH x PATCH
    windows -> [H-7, W-7, C] map of unit feature vectors."""
    feats = net.features(frame[None])[0][0]
    pooled = F.avg_pool2d(feats[None], _PATCH, stride=1)[0].permute(1, 2, 0)
    return pooled / pooled.norm(dim=2, keepdim=True).clamp_min(1e-12)


def _nonlocal_positions(h: int, w: int, py: int, px: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    ys, xs = np.mgrid[0 : h - _PATCH + 1, 0 : w - _PATCH + 1]
    far = (ys - py) ** 2 + (xs - px) ** 2 >= (h / 2) ** 2
    cand = np.argwhere(far)
    if len(cand) == 0:
        raise ValueError(f"image of size {h} too small for non-local patches")
    replace = len(cand) < _NUM_NONLOCAL
    picks = rng.choice(len(cand), size=_NUM_NONLOCAL, replace=replace)
    return [tuple(cand[i]) for i in picks]


def build_patch_sets(
    out_frame: torch.Tensor,
    content_frame: torch.Tensor,
    net: FeatureNet,
    rng: np.random.Generator,
) -> list[PatchSet]:
    """One PatchSet per stride-8 grid anchor of the output frame.

    Anchors come from the output frame; the positive is the same-location
    content patch; negatives are its 8 grid neighbors (toroidal at borders)
    plus 8 seeded patches at least H/2 pixels away.
    """
    h, w = out_frame.shape[-2:]
    out_map = _pooled_unit_features(out_frame, net)
    con_map = _pooled_unit_features(content_frame, net)
    grid_y = list(range(0, h - _PATCH + 1, _PATCH))
    grid_x = list(range(0, w - _PATCH + 1, _PATCH))
    sets = []
    for gy, ay in enumerate(grid_y):
        for gx, ax in enumerate(grid_x):
            negs = []
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    if dy == 0 and dx == 0:
                        continue
                    ny = grid_y[(gy + dy) % len(grid_y)]
                    nx = grid_x[(gx + dx) % len(grid_x)]
                    negs.append(con_map[ny, nx])
            for ny, nx in _nonlocal_positions(h, w, ay, ax, rng):
                negs.append(con_map[ny, nx])
            sets.append(PatchSet(out_map[ay, ax], con_map[ay, ax], torch.stack(negs)))
    return sets


def harmonious_loss(
    eps_hat: torch.Tensor,
    eps: torch.Tensor,
    eps_image: torch.Tensor,
    out_frames: torch.Tensor,
    content_frames: torch.Tensor,
    net: FeatureNet,
    weights: LossWeights | None = None,
    seed: int = 0,
) -> torch.Tensor:
    """Temporal-stage objective over one clip of N frames.

    Global part: noise regression over the whole clip plus a per-frame pull
    toward the frozen image baseline (no gradient flows into the baseline).
    Local part: patch contrastive terms between decoded output frames and the
    content frames, summed over a deterministic anchor grid.
    """
    w = weights or LossWeights()
    n = eps_hat.shape[0]
    if not (eps.shape[0] == eps_image.shape[0] == out_frames.shape[0] == content_frames.shape[0] == n):
        raise ValueError("frame-count mismatch between harmonious-loss inputs")
    loss = w.lambda_hg1 * _l2_norm(eps - eps_hat, w.squared)
    eps_image = eps_image.detach()
    for i in range(n):
        loss = loss + w.lambda_hg2 * _l2_norm(eps_hat[i] - eps_image[i], w.squared)
    if w.lambda_hl > 0:
        rng = np.random.default_rng(seed)
        for i in range(n):
            for ps in build_patch_sets(out_frames[i], content_frames[i], net, rng):
                loss = loss + w.lambda_hl * patch_contrastive(ps, w.tau)
    return loss
