"""Three-stage training with hybrid supervision.

Stage "image" fine-tunes the denoiser, the content/style conditioning (with
their null tokens), and both discriminators while the codec and feature net
stay frozen. Stage "adapter" trains one control adapter against the content
loss only. Stage "temporal" trains the inserted temporal layers of an
inflated video backbone with the harmonious consistency loss, using the
frozen image backbone as the per-frame baseline.

Every stage is fully deterministic given (seed, config, data): all randomness
flows from one numpy generator whose state is checkpointed, so a resumed run
reproduces the exact loss stream.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .backbone import inflate_from_image_model
from .conditioning import style_stats
from .data import Image, annotate
from .errors import StateError
from .losses import LossWeights, content_loss, gan_losses, harmonious_loss, style_loss
from .pipeline import Models


class SupervisionMode(Enum):
    content_style = 0
    style_style = 1
    none_style = 2
    content_none = 3


@dataclass
class StageConfig:
    stage: str = "image"
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-4
    seed: int = 0
    supervision_probs: tuple[float, float, float, float] = (0.7, 0.1, 0.1, 0.1)
    weights: LossWeights = field(default_factory=LossWeights)
    grad_clip: float = 1.0
    checkpoint_every: int = 500
    log_every: int = 10
    clip_frames: int = 4
    adapter_kind: str | None = None
    # temporal stage only: fraction of the schedule to draw timesteps from
    t_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        probs = np.asarray(self.supervision_probs, dtype=np.float64)
        if (probs < 0).any() or abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError("supervision probabilities must be >= 0 and sum to 1")
        if not 0.0 <= self.t_range[0] < self.t_range[1] <= 1.0:
            raise ValueError("t_range must satisfy 0 <= lo < hi <= 1")


def sample_supervision(
    rng: np.random.Generator, probs: tuple[float, ...] = (0.7, 0.1, 0.1, 0.1)
) -> SupervisionMode:
    """Categorical draw over the four supervision modes."""
    u = rng.random()
    edges = np.cumsum(probs)
    return SupervisionMode(int(np.searchsorted(edges, u, side="right").clip(0, 3)))


@dataclass
class TrainExample:
    mode: SupervisionMode
    t: int
    content_image: Image | None  # None -> learned null-content token
    style_image: Image | None  # None -> learned null-style token
    target_image: Image  # its latent is the noise-regression target


def build_batch(
    mode: SupervisionMode, content: Image, style: Image, t: int, rng: np.random.Generator
) -> TrainExample:
    """Assemble one training example under the given supervision mode."""
    if mode is SupervisionMode.content_style:
        return TrainExample(mode, t, content, style, content)
    if mode is SupervisionMode.style_style:
        return TrainExample(mode, t, style, style, style)
    if mode is SupervisionMode.none_style:
        # no content: the target is simply "an image with this style"
        return TrainExample(mode, t, None, style, style)
    return TrainExample(mode, t, content, None, content)


def _freeze(module: torch.nn.Module) -> None:
    for p in module.parameters():
        p.requires_grad_(False)


def _unfreeze(module: torch.nn.Module) -> None:
    for p in module.parameters():
        p.requires_grad_(True)


def parameter_snapshot(modules: dict[str, torch.nn.Module]) -> dict[str, np.ndarray]:
    out = {}
    for prefix, module in modules.items():
        for name, p in module.state_dict().items():
            if torch.is_tensor(p) and p.is_floating_point():
                out[f"{prefix}.{name}"] = p.detach().cpu().numpy().copy()
    return out


def changed_parameters(before: dict[str, np.ndarray], after: dict[str, np.ndarray]) -> set[str]:
    return {k for k in before if not np.array_equal(before[k], after[k])}


class _LossLog:
    def __init__(self, path: Path | None, fields: list[str]):
        self.path = path
        self.fields = fields
        self.rows: list[dict] = []
        if path is not None and not path.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", newline="") as f:
                csv.writer(f).writerow(["step"] + fields)

    def append(self, step: int, values: dict[str, float]):
        self.rows.append({"step": step, **values})
        if self.path is not None:
            with open(self.path, "a", newline="") as f:
                csv.writer(f).writerow([step] + [f"{values.get(k, 0.0):.6f}" for k in self.fields])


def _optimizer_arrays(opt: torch.optim.Optimizer) -> dict[str, np.ndarray]:
    out = {}
    for idx, state in opt.state_dict()["state"].items():
        for key, value in state.items():
            if torch.is_tensor(value):
                out[f"optim/{idx}.{key}"] = value.detach().cpu().to(torch.float32).numpy()
    return out


def _restore_optimizer(opt: torch.optim.Optimizer, params: dict[str, np.ndarray]) -> None:
    state: dict[int, dict] = {}
    for name, arr in params.items():
        if not name.startswith("optim/"):
            continue
        idx_s, key = name[len("optim/") :].split(".", 1)
        entry = state.setdefault(int(idx_s), {})
        tensor = torch.from_numpy(np.ascontiguousarray(arr))
        entry[key] = tensor if key != "step" else tensor.reshape(())
    sd = opt.state_dict()
    sd["state"] = state
    opt.load_state_dict(sd)


def _rng_state_json(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return {
        "bit_generator": state["bit_generator"],
        "state": {k: str(v) for k, v in state["state"].items()},
        "has_uint32": state["has_uint32"],
        "uinteger": state["uinteger"],
    }


def _rng_from_json(blob: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": blob["bit_generator"],
        "state": {k: int(v) for k, v in blob["state"].items()},
        "has_uint32": blob["has_uint32"],
        "uinteger": blob["uinteger"],
    }
    return rng


def _encode_batch(models: Models, images: list[Image]) -> torch.Tensor:
    px = torch.from_numpy(np.stack([img.pixels for img in images]))
    with torch.no_grad():
        return models.codec.encode_tensor(px)


def _denoise(models: Models, examples, z_t, t_vec, pyramid=None, video=False):
    """Forward pass with per-example null handling; returns eps_hat."""
    unet = models.video_unet if video else models.unet
    temb = unet.time_embed(t_vec)
    fc_rows = []
    enc_idx = [i for i, ex in enumerate(examples) if ex.content_image is not None]
    if enc_idx:
        z_c = _encode_batch(models, [examples[i].content_image for i in enc_idx])
        fc_real = models.content_encoder(z_c, temb[enc_idx])
    h, w = z_t.shape[-2:]
    j = 0
    for i, ex in enumerate(examples):
        if ex.content_image is None:
            fc_rows.append(models.content_encoder.null_token[:, None, None].expand(-1, h, w))
        else:
            fc_rows.append(fc_real[j])
            j += 1
    f_c = torch.stack(fc_rows)
    fs_rows = []
    for ex in examples:
        if ex.style_image is None:
            fs_rows.append(models.style_embedder.null_token)
        else:
            with torch.no_grad():
                stats = style_stats(ex.style_image, models.feature_net)
            fs_rows.append(models.style_embedder.embed(stats).values)
    f_s = torch.stack(fs_rows)
    return unet(torch.cat([z_t, f_c], dim=1), temb + f_s, pyramid=pyramid, video=video)


def _q_sample_batch(models: Models, z0: torch.Tensor, t_vec: torch.Tensor, eps: torch.Tensor):
    ab = torch.from_numpy(models.schedule.alphas_bar[t_vec.numpy()]).to(z0.dtype)
    ab = ab[:, None, None, None]
    return torch.sqrt(ab) * z0 + torch.sqrt(1 - ab) * eps


def _stage_paths(out_dir: str | Path | None, stage: str):
    if out_dir is None:
        return None, None
    out_dir = Path(out_dir)
    return out_dir, out_dir / "logs" / f"stage-{stage}.csv"


def train_stage1(
    models: Models,
    content_ds,
    style_ds,
    cfg: StageConfig,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
) -> dict:
    """Image-model fine-tune: content loss always; style and adversarial
    losses on every example whose style input is real. Generator and
    discriminators alternate 1:1."""
    if not models.codec.trained:
        raise StateError("stage image needs a trained codec checkpoint")
    if not models.feature_net.frozen:
        raise StateError("stage image needs a trained (frozen) feature net checkpoint")
    _freeze(models.codec)
    _freeze(models.feature_net)
    for mod in (models.unet, models.content_encoder, models.style_embedder, models.d_ori, models.d_patch):
        _unfreeze(mod)

    gen_params = (
        list(models.unet.parameters())
        + list(models.content_encoder.parameters())
        + list(models.style_embedder.parameters())
    )
    dis_params = list(models.d_ori.parameters()) + list(models.d_patch.parameters())
    opt_g = torch.optim.Adam(gen_params, lr=cfg.lr)
    opt_d = torch.optim.Adam(dis_params, lr=cfg.lr)

    rng = np.random.default_rng(cfg.seed)
    start_step = 0
    if resume is not None:
        manifest, params = ckpt.load_checkpoint(resume)
        models._load_group(models.image_group_modules(), params)
        _restore_optimizer(opt_g, {k[2:]: v for k, v in params.items() if k.startswith("g:")})
        _restore_optimizer(opt_d, {k[2:]: v for k, v in params.items() if k.startswith("d:")})
        rng = _rng_from_json(manifest["rng_state"])
        start_step = manifest["step"]

    out_dir, log_path = _stage_paths(out_dir, "image")
    log = _LossLog(log_path, ["loss", "content", "style", "gan", "patch_gan", "d"])
    T = models.schedule.num_timesteps
    w = cfg.weights
    history = []

    def save(step):
        if out_dir is None:
            return
        extra_params = {f"g:{k}": v for k, v in _optimizer_arrays(opt_g).items()}
        extra_params.update({f"d:{k}": v for k, v in _optimizer_arrays(opt_d).items()})
        params = models._group_params(models.image_group_modules())
        params.update(extra_params)
        ckpt.save_checkpoint(
            out_dir / "image", "image", models.config, cfg.seed, step, params,
            {"rng_state": _rng_state_json(rng)},
        )

    for step in range(start_step, start_step + cfg.steps):
        examples = []
        for _ in range(cfg.batch_size):
            mode = sample_supervision(rng, cfg.supervision_probs)
            content = content_ds[int(rng.integers(len(content_ds)))]
            style = style_ds[int(rng.integers(len(style_ds)))]
            t = int(rng.integers(T))
            examples.append(build_batch(mode, content, style, t, rng))
        t_vec = torch.tensor([ex.t for ex in examples], dtype=torch.long)
        z0 = _encode_batch(models, [ex.target_image for ex in examples])
        eps = torch.from_numpy(
            rng.standard_normal(z0.shape).astype(np.float32)
        )
        z_t = _q_sample_batch(models, z0, t_vec, eps)
        eps_hat = _denoise(models, examples, z_t, t_vec)

        loss_c = content_loss(eps, eps_hat, w)
        total = loss_c
        parts = {"content": float(loss_c.detach()), "style": 0.0, "gan": 0.0, "patch_gan": 0.0, "d": 0.0}
        styled = [i for i, ex in enumerate(examples) if ex.style_image is not None]
        gan = None
        if styled:
            ab = torch.from_numpy(models.schedule.alphas_bar[t_vec.numpy()]).to(z_t.dtype)
            ab = ab[:, None, None, None]
            z0_hat = (z_t - torch.sqrt(1 - ab) * eps_hat) / torch.sqrt(ab)
            out_images = models.codec.decode_tensor(z0_hat[styled])
            style_px = torch.from_numpy(
                np.stack([examples[i].style_image.pixels for i in styled])
            )
            loss_s = style_loss(out_images, style_px, models.feature_net, w)
            gan = gan_losses(out_images, style_px, models.d_ori, models.d_patch, rng, w)
            total = total + loss_s + gan["g"] + gan["patch_g"]
            parts["style"] = float(loss_s.detach())
            parts["gan"] = float(gan["g"].detach())
            parts["patch_gan"] = float(gan["patch_g"].detach())

        opt_g.zero_grad(set_to_none=True)
        opt_d.zero_grad(set_to_none=True)
        total.backward(retain_graph=False)
        torch.nn.utils.clip_grad_norm_(gen_params, cfg.grad_clip)
        opt_g.step()

        if gan is not None:
            d_total = gan["d"] + gan["patch_d"]
            opt_d.zero_grad(set_to_none=True)
            opt_g.zero_grad(set_to_none=True)
            d_total.backward()
            torch.nn.utils.clip_grad_norm_(dis_params, cfg.grad_clip)
            opt_d.step()
            parts["d"] = float(d_total.detach())

        parts["loss"] = float(total.detach())
        history.append(parts)
        if (step + 1) % cfg.log_every == 0 or step == start_step:
            log.append(step + 1, parts)
        if out_dir is not None and (step + 1) % cfg.checkpoint_every == 0:
            save(step + 1)

    save(start_step + cfg.steps)
    return {"history": history, "steps": start_step + cfg.steps}


def train_stage2(
    models: Models,
    kind: str,
    content_ds,
    style_ds,
    cfg: StageConfig,
    out_dir: str | Path | None = None,
) -> dict:
    """Adapter training: content loss only, adapter parameters only, control
    maps annotated from the content image, injection weight fixed at 1."""
    if kind not in models.adapters:
        raise StateError(f"no adapter of kind {kind!r} is registered")
    for mod in (models.codec, models.feature_net, models.unet, models.content_encoder,
                models.style_embedder, models.d_ori, models.d_patch):
        _freeze(mod)
    adapter = models.adapters[kind]
    _unfreeze(adapter)
    opt = torch.optim.Adam(adapter.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    out_dir, log_path = _stage_paths(out_dir, f"adapter-{kind}")
    log = _LossLog(log_path, ["loss"])
    T = models.schedule.num_timesteps
    history = []
    map_cache: dict[int, np.ndarray] = {}

    for step in range(cfg.steps):
        idx = [int(rng.integers(len(content_ds))) for _ in range(cfg.batch_size)]
        examples = []
        for i in idx:
            style = style_ds[int(rng.integers(len(style_ds)))]
            t = int(rng.integers(T))
            examples.append(build_batch(SupervisionMode.content_style, content_ds[i], style, t, rng))
        maps = []
        for i in idx:
            if i not in map_cache:
                map_cache[i] = annotate(content_ds[i], kind).map
            maps.append(map_cache[i])
        pyramid = adapter(torch.from_numpy(np.stack(maps)))
        t_vec = torch.tensor([ex.t for ex in examples], dtype=torch.long)
        z0 = _encode_batch(models, [ex.target_image for ex in examples])
        eps = torch.from_numpy(rng.standard_normal(z0.shape).astype(np.float32))
        z_t = _q_sample_batch(models, z0, t_vec, eps)
        eps_hat = _denoise(models, examples, z_t, t_vec, pyramid=pyramid)
        loss = content_loss(eps, eps_hat, cfg.weights)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(adapter.parameters(), cfg.grad_clip)
        opt.step()
        history.append(float(loss.detach()))
        if (step + 1) % cfg.log_every == 0 or step == 0:
            log.append(step + 1, {"loss": history[-1]})

    if out_dir is not None:
        models.save_group(out_dir, f"adapter:{kind}", seed=cfg.seed, step=cfg.steps,
                          extra={"annotator": kind})
    return {"history": history}


def train_stage3(
    models: Models,
    video_ds,
    style_ds,
    cfg: StageConfig,
    out_dir: str | Path | None = None,
    select_fn=None,
    select_every: int = 0,
) -> dict:
    """Temporal-layer training against the harmonious consistency loss.

    Supervision is fixed to content-style; each step uses one clip window of
    `clip_frames` frames with a shared timestep and independent per-frame
    noise. The frozen image backbone provides the per-frame baseline.

    When `select_fn` is given it is evaluated every `select_every` steps
    (and at step 0, the identity-initialized model); the temporal parameters
    scoring highest are restored at the end. This is ordinary early stopping
    on a validation probe; only temporal parameters are ever touched."""
    if models.video_unet is None:
        models.video_unet = inflate_from_image_model(
            models.unet, max_frames=max(cfg.clip_frames, 8), seed=cfg.seed
        )
    for mod in (models.codec, models.feature_net, models.unet, models.content_encoder,
                models.style_embedder, models.d_ori, models.d_patch):
        _freeze(mod)
    video = models.video_unet
    temporal_params = [p for n, p in video.named_parameters() if n.startswith("temporal.")]
    for n, p in video.named_parameters():
        p.requires_grad_(n.startswith("temporal."))
    opt = torch.optim.Adam(temporal_params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    out_dir, log_path = _stage_paths(out_dir, "temporal")
    log = _LossLog(log_path, ["loss"])
    T = models.schedule.num_timesteps
    n = cfg.clip_frames
    history = []

    def temporal_state():
        return {
            k: v.detach().clone()
            for k, v in video.state_dict().items()
            if k.startswith("temporal.")
        }

    best = None
    if select_fn is not None:
        best = {"score": float(select_fn(models)), "step": 0, "state": temporal_state()}

    t_lo, t_hi = int(cfg.t_range[0] * T), max(int(cfg.t_range[1] * T), int(cfg.t_range[0] * T) + 1)
    for step in range(cfg.steps):
        clip = video_ds[int(rng.integers(len(video_ds)))]
        start = int(rng.integers(0, clip.num_frames - n + 1))
        frames = clip.frames[start : start + n]
        style = style_ds[int(rng.integers(len(style_ds)))]
        t = int(rng.integers(t_lo, t_hi))
        examples = [
            build_batch(SupervisionMode.content_style, Image(f, f"{clip.id}:{start + k}"), style, t, rng)
            for k, f in enumerate(frames)
        ]
        t_vec = torch.full((n,), t, dtype=torch.long)
        z0 = _encode_batch(models, [ex.target_image for ex in examples])
        eps = torch.from_numpy(rng.standard_normal(z0.shape).astype(np.float32))
        z_t = _q_sample_batch(models, z0, t_vec, eps)
        eps_hat = _denoise(models, examples, z_t, t_vec, video=True)
        with torch.no_grad():
            eps_image = _denoise(models, examples, z_t, t_vec, video=False)
        ab = float(models.schedule.alphas_bar[t])
        z0_hat = (z_t - np.sqrt(1 - ab) * eps_hat) / np.sqrt(ab)
        out_frames = models.codec.decode_tensor(z0_hat)
        content_frames = torch.from_numpy(frames)
        loss = harmonious_loss(
            eps_hat, eps, eps_image, out_frames, content_frames,
            models.feature_net, cfg.weights, seed=int(rng.integers(2**31)),
        )
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(temporal_params, cfg.grad_clip)
        opt.step()
        history.append(float(loss.detach()))
        if (step + 1) % cfg.log_every == 0 or step == 0:
            log.append(step + 1, {"loss": history[-1]})
        if best is not None and select_every and (step + 1) % select_every == 0:
            score = float(select_fn(models))
            if score > best["score"]:
                best = {"score": score, "step": step + 1, "state": temporal_state()}

    selected_step = cfg.steps
    if best is not None:
        video.load_state_dict(best["state"], strict=False)
        selected_step = best["step"]

    if out_dir is not None:
        models.save_group(out_dir, "temporal", seed=cfg.seed, step=selected_step)
    return {"history": history, "selected_step": selected_step}
