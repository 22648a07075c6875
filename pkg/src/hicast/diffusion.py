"""Noise schedule, forward process, deterministic DDIM sampling, and the
three-branch classifier-free guidance combination.

The guidance weights (w_o, w_c, w_s) must sum to 1; individual weights may be
negative. Branches with weight 0 are never evaluated.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch


@dataclass
class NoiseSchedule:
    betas: np.ndarray  # float64 [T]
    alphas_bar: np.ndarray  # float64 [T], cumulative products of (1 - beta)

    @property
    def num_timesteps(self) -> int:
        return len(self.betas)

    def _ab(self, t: int) -> float:
        # t == -1 denotes the virtual clean state before the chain starts
        return 1.0 if t < 0 else float(self.alphas_bar[t])

    def q_sample(self, z0: torch.Tensor, t: int, eps: torch.Tensor) -> torch.Tensor:
        """Diffuse a clean latent to timestep t with the given noise."""
        ab = self._ab(t)
        return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps

    def predict_x0(self, z_t: torch.Tensor, eps_hat: torch.Tensor, t: int) -> torch.Tensor:
        """Invert q_sample given a noise estimate."""
        ab = self._ab(t)
        return (z_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)

    def ddim_step(self, z_t: torch.Tensor, eps_hat: torch.Tensor, t: int, t_prev: int) -> torch.Tensor:
        """Deterministic (eta = 0) update from t to t_prev; t_prev = -1 lands
        on the clean estimate."""
        ab_prev = self._ab(t_prev)
        x0 = self.predict_x0(z_t, eps_hat, t)
        return np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps_hat


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule with cumulative products kept in double precision."""
    if not 0.0 < beta_start < beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas_bar = np.cumprod(1.0 - betas)
    return NoiseSchedule(betas, alphas_bar)


@dataclass
class StyleScalingFactors:
    """Guidance weights of the full / content-only / style-only branches."""

    w_o: float = 1.0
    w_c: float = 0.0
    w_s: float = 0.0

    def __post_init__(self):
        total = self.w_o + self.w_c + self.w_s
        if abs(total - 1.0) >= 1e-9:
            raise ValueError(f"style scaling factors must satisfy w_o + w_c + w_s = 1, got {total}")


@dataclass
class SamplerConfig:
    steps: int = 20
    eta: float = 0.0  # fixed: only the deterministic sampler is supported
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("sampler needs at least 1 step")
        if self.eta != 0.0:
            raise ValueError("only eta = 0 (deterministic DDIM) is supported")


def cfg_combine(
    eps_full: torch.Tensor | None,
    eps_content_only: torch.Tensor | None,
    eps_style_only: torch.Tensor | None,
    w: StyleScalingFactors,
) -> torch.Tensor:
    """Weighted sum of the three guidance branches.

    A branch may be None only when its weight is exactly 0.
    """
    parts = []
    for eps, weight, name in (
        (eps_full, w.w_o, "full"),
        (eps_content_only, w.w_c, "content-only"),
        (eps_style_only, w.w_s, "style-only"),
    ):
        if weight == 0.0:
            continue
        if eps is None:
            raise ValueError(f"{name} branch has weight {weight} but no prediction")
        parts.append(weight * eps)
    if not parts:
        raise ValueError("all branch weights are zero")
    out = parts[0]
    for p in parts[1:]:
        out = out + p
    return out


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Evenly spaced descending timesteps from T-1 down to 0."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must be in [1, {T}], got {steps}")
    return [int(t) for t in np.round(np.linspace(T - 1, 0, steps))]


BranchFn = Callable[[torch.Tensor, int], torch.Tensor]


def sample(
    schedule: NoiseSchedule,
    branches: tuple[BranchFn, BranchFn | None, BranchFn | None],
    w: StyleScalingFactors,
    shape: tuple[int, ...],
    config: SamplerConfig,
) -> torch.Tensor:
    """Run DDIM from seeded Gaussian noise and return the clean latent estimate.

    `branches` holds the (full, content-only, style-only) noise predictors;
    zero-weight branches are skipped entirely.
    """
    rng = np.random.default_rng(config.seed)
    z = torch.from_numpy(rng.standard_normal(shape).astype(np.float32))
    ts = ddim_timesteps(schedule.num_timesteps, config.steps)
    fn_full, fn_content, fn_style = branches
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else -1
        eps = cfg_combine(
            fn_full(z, t) if w.w_o != 0.0 else None,
            fn_content(z, t) if w.w_c != 0.0 else None,
            fn_style(z, t) if w.w_s != 0.0 else None,
            w,
        )
        z = schedule.ddim_step(z, eps, t, t_prev)
    return z
