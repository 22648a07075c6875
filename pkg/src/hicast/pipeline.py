"""Model bundle and end-to-end stylization.

`Models` groups the codec, feature net, conditioning modules, denoiser,
discriminators, optional video denoiser, and adapters, and knows how to save
and load itself as a directory of per-group checkpoints. `stylize_image` and
`stylize_video` run the full conditioned DDIM loop with three-way guidance.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .adapter import AdapterPyramid, StyleAdapter, combine
from .backbone import BackboneConfig, UNet, inflate_from_image_model
from .codec import Autoencoder, CodecConfig
from .conditioning import ContentEncoder, FeatureNet, StyleEmbedder, style_stats
from .data import Image, annotate
from .diffusion import NoiseSchedule, SamplerConfig, StyleScalingFactors, make_schedule, sample
from .errors import StateError
from .losses import Discriminator, PatchDiscriminator


@dataclass
class Models:
    codec: Autoencoder
    feature_net: FeatureNet
    content_encoder: ContentEncoder
    style_embedder: StyleEmbedder
    unet: UNet
    d_ori: Discriminator
    d_patch: PatchDiscriminator
    schedule: NoiseSchedule
    video_unet: UNet | None = None
    adapters: dict[str, StyleAdapter] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @classmethod
    def build(cls, config: dict) -> "Models":
        """Fresh, seeded initialization of every module from a config document."""
        c_cfg = config.get("codec", {})
        f_cfg = config.get("feature_net", {})
        b_cfg = config.get("backbone", {})
        d_cfg = config.get("diffusion", {})
        codec = Autoencoder(
            CodecConfig(
                downsample_factor=c_cfg.get("downsample_factor", 4),
                latent_channels=c_cfg.get("latent_channels", 4),
                base_channels=c_cfg.get("base_channels", 32),
            ),
            seed=c_cfg.get("seed", 1),
        )
        feature_net = FeatureNet(
            tuple(f_cfg.get("level_channels", (8, 16, 32))), seed=f_cfg.get("seed", 2)
        )
        d_emb = b_cfg.get("d_emb", 64)
        c_content = b_cfg.get("c_content", 3)
        c_lat = codec.config.latent_channels
        backbone_cfg = BackboneConfig(
            in_channels=c_lat + c_content,
            out_channels=c_lat,
            level_channels=tuple(b_cfg.get("level_channels", (32, 64))),
            attention_levels=tuple(b_cfg.get("attention_levels", (1,))),
            d_emb=d_emb,
            num_timesteps=d_cfg.get("num_timesteps", 1000),
        )
        unet = UNet(backbone_cfg, seed=b_cfg.get("seed", 3))
        content_encoder = ContentEncoder(
            c_lat=c_lat, c_content=c_content, d_emb=d_emb, seed=b_cfg.get("seed", 3) + 1
        )
        style_embedder = StyleEmbedder(
            feature_net.stats_dim, d_emb=d_emb, seed=b_cfg.get("seed", 3) + 2
        )
        d_ori = Discriminator(seed=b_cfg.get("seed", 3) + 3)
        d_patch = PatchDiscriminator(seed=b_cfg.get("seed", 3) + 4)
        schedule = make_schedule(
            d_cfg.get("num_timesteps", 1000),
            d_cfg.get("beta_start", 1e-4),
            d_cfg.get("beta_end", 0.02),
        )
        return cls(codec, feature_net, content_encoder, style_embedder, unet, d_ori, d_patch,
                   schedule, config=config)

    # -- persistence ------------------------------------------------------

    def image_group_modules(self) -> dict[str, torch.nn.Module]:
        return {
            "unet": self.unet,
            "content_encoder": self.content_encoder,
            "style_embedder": self.style_embedder,
            "d_ori": self.d_ori,
            "d_patch": self.d_patch,
        }

    def _group_params(self, modules: dict[str, torch.nn.Module]) -> dict[str, np.ndarray]:
        out = {}
        for prefix, module in modules.items():
            for name, arr in ckpt.module_state_arrays(module).items():
                out[f"{prefix}.{name}"] = arr
        return out

    def _load_group(self, modules: dict[str, torch.nn.Module], params: dict[str, np.ndarray]) -> None:
        for prefix, module in modules.items():
            sub = {k[len(prefix) + 1 :]: v for k, v in params.items() if k.startswith(prefix + ".")}
            ckpt.load_module_state(module, sub)

    def save_group(self, out_dir: str | Path, group: str, seed: int = 0, step: int = 0,
                   extra: dict | None = None) -> Path:
        out_dir = Path(out_dir)
        if group == "codec":
            params = ckpt.module_state_arrays(self.codec)
        elif group == "features":
            params = ckpt.module_state_arrays(self.feature_net)
        elif group == "image":
            params = self._group_params(self.image_group_modules())
        elif group == "temporal":
            if self.video_unet is None:
                raise StateError("no video backbone to save")
            params = ckpt.module_state_arrays(self.video_unet)
        elif group.startswith("adapter:"):
            kind = group.split(":", 1)[1]
            params = ckpt.module_state_arrays(self.adapters[kind])
            out_dir = out_dir / "adapters"
            group = kind
        else:
            raise ValueError(f"unknown checkpoint group {group!r}")
        meta = dict(extra or {})
        if group == "features":
            meta["level_channels"] = list(self.feature_net.level_channels)
        return ckpt.save_checkpoint(out_dir / group, group, self.config, seed, step, params, meta)

    def load_available(self, run_dir: str | Path) -> list[str]:
        """Load every checkpoint group present under a run directory."""
        run_dir = Path(run_dir)
        loaded = []
        if (run_dir / "codec" / "manifest.json").exists():
            _, params = ckpt.load_checkpoint(run_dir / "codec")
            ckpt.load_module_state(self.codec, params)
            loaded.append("codec")
        if (run_dir / "features" / "manifest.json").exists():
            _, params = ckpt.load_checkpoint(run_dir / "features")
            ckpt.load_module_state(self.feature_net, params)
            self.feature_net.freeze()
            loaded.append("features")
        if (run_dir / "image" / "manifest.json").exists():
            _, params = ckpt.load_checkpoint(run_dir / "image")
            self._load_group(self.image_group_modules(), params)
            loaded.append("image")
        adapters_dir = run_dir / "adapters"
        if adapters_dir.is_dir():
            for sub in sorted(adapters_dir.iterdir()):
                if (sub / "manifest.json").exists():
                    kind = sub.name
                    adapter = StyleAdapter(
                        kind,
                        level_channels=self.unet.config.level_channels,
                        factor=self.codec.config.downsample_factor,
                        seed=0,
                    )
                    _, params = ckpt.load_checkpoint(sub)
                    ckpt.load_module_state(adapter, params)
                    self.adapters[kind] = adapter
                    loaded.append(f"adapter:{kind}")
        if (run_dir / "temporal" / "manifest.json").exists():
            self.video_unet = inflate_from_image_model(self.unet, seed=0)
            _, params = ckpt.load_checkpoint(run_dir / "temporal")
            ckpt.load_module_state(self.video_unet, params)
            loaded.append("temporal")
        return loaded


def build_pyramid(
    models: Models,
    content_frames: list[Image] | np.ndarray,
    adapter_weights: dict[str, float],
) -> AdapterPyramid | None:
    """Weighted sum of adapter pyramids over per-frame control maps.

    Each adapter annotates every frame independently; passing `Image` objects
    (rather than a bare [N,3,H,W] array) lets the annotators use generator
    ground truth where it exists.
    """
    if not isinstance(content_frames, list):
        content_frames = [Image(f, f"frame{i}") for i, f in enumerate(content_frames)]
    weighted = []
    for kind, weight in adapter_weights.items():
        if kind not in models.adapters:
            raise ValueError(f"no adapter of kind {kind!r} is loaded")
        maps = np.stack([annotate(img, kind).map for img in content_frames])
        with torch.no_grad():
            weighted.append((models.adapters[kind](torch.from_numpy(maps)), float(weight)))
    return combine(weighted)


def make_branches(
    models: Models,
    content_frames: np.ndarray,
    style_image: Image | np.ndarray,
    pyramid: AdapterPyramid | None = None,
    video: bool = False,
):
    """Noise-prediction closures for the (full, content-only, style-only)
    guidance branches over a frame stack [N,3,H,W]."""
    unet = models.video_unet if video else models.unet
    if video and unet is None:
        raise StateError("video sampling requested but no temporal backbone is available")
    n = content_frames.shape[0]
    with torch.no_grad():
        z_c = models.codec.encode_tensor(torch.from_numpy(np.ascontiguousarray(content_frames)))
        stats = style_stats(style_image, models.feature_net)
        f_s_real = models.style_embedder.embed(stats).values
    f_s_null = models.style_embedder.null_token
    null_map = models.content_encoder.null_token[:, None, None].expand(
        n, -1, z_c.shape[-2], z_c.shape[-1]
    )

    def branch(use_content: bool, use_style: bool):
        def fn(z: torch.Tensor, t: int) -> torch.Tensor:
            with torch.no_grad():
                temb = unet.time_embed(torch.full((n,), t, dtype=torch.long))
                f_c = models.content_encoder(z_c, temb) if use_content else null_map
                f_s = f_s_real if use_style else f_s_null
                emb = temb + f_s[None].expand(n, -1) if f_s.ndim == 1 else temb + f_s
                return unet(torch.cat([z, f_c], dim=1), emb, pyramid=pyramid, video=video)

        return fn

    return branch(True, True), branch(True, False), branch(False, True)


def stylize_image(
    models: Models,
    content: Image,
    style: Image,
    w: StyleScalingFactors | None = None,
    sampler: SamplerConfig | None = None,
    adapter_weights: dict[str, float] | None = None,
) -> np.ndarray:
    """Full image pipeline: conditions -> guided DDIM -> decoded [-1,1] pixels."""
    pyramid = build_pyramid(models, [content], adapter_weights or {})
    out = stylize_video(models, content.pixels[None], style, w, sampler,
                        pyramid=pyramid, use_temporal=False)
    return out[0]


def stylize_video(
    models: Models,
    content_frames: np.ndarray,
    style: Image,
    w: StyleScalingFactors | None = None,
    sampler: SamplerConfig | None = None,
    adapter_weights: dict[str, float] | None = None,
    use_temporal: bool = True,
    pyramid: AdapterPyramid | None = None,
) -> np.ndarray:
    """Stylize a frame stack [N,3,H,W]. With `use_temporal=False` the frames
    are denoised independently by the image backbone (per-frame baseline)."""
    w = w or StyleScalingFactors()
    sampler = sampler or SamplerConfig()
    if pyramid is None:
        pyramid = build_pyramid(models, content_frames, adapter_weights or {})
    video = use_temporal and models.video_unet is not None
    branches = make_branches(models, content_frames, style, pyramid, video=video)
    n = content_frames.shape[0]
    c_lat = models.codec.config.latent_channels
    hw = content_frames.shape[-1] // models.codec.config.downsample_factor
    z0 = sample(models.schedule, branches, w, (n, c_lat, hw, hw), sampler)
    with torch.no_grad():
        out = models.codec.decode_tensor(z0)
    return out.numpy()
