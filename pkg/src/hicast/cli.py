"""Command-line entry point.

Subcommands: gen-data, train, sample, sweep, eval. Every command is
deterministic given its seed/config/inputs and records the resolved
configuration in its outputs. Exit codes: 0 success, 2 usage or argument
error, 3 missing dependency, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import load_config
from .data import (
    gen_content_image,
    gen_style_image,
    gen_video_clip,
    load_folder,
    load_image,
    save_image,
    write_flow,
    write_occlusion,
)
from .diffusion import SamplerConfig, StyleScalingFactors
from .errors import StateError
from .losses import LossWeights
from .metrics import eval_report, write_report
from .pipeline import Models, stylize_image, stylize_video
from .training import StageConfig, train_stage1, train_stage2, train_stage3

RUN_SCHEMA = "hicast-run/1"


def _parse_adapter_args(values: list[str]) -> dict[str, float]:
    out = {}
    for item in values:
        if ":" not in item:
            raise ValueError(f"adapter spec {item!r} must look like KIND:WEIGHT")
        kind, weight = item.split(":", 1)
        out[kind] = float(weight)
    return out


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ValueError(f"output directory {out} is not empty (use --force to overwrite)")
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "styles").mkdir(parents=True, exist_ok=True)
    (out / "videos").mkdir(parents=True, exist_ok=True)
    manifest = {
        "schema_version": "hicast-corpus/1",
        "seed": args.seed,
        "size": args.size,
        "images": [],
        "styles": [],
        "videos": [],
    }
    for i in range(args.images):
        img = gen_content_image(args.seed + i, args.size)
        name = f"img_{i:05d}.png"
        save_image(img, out / "images" / name)
        manifest["images"].append(name)
    for i in range(args.styles):
        img = gen_style_image(args.seed + i, args.size)
        name = f"style_{i:05d}.png"
        save_image(img, out / "styles" / name)
        manifest["styles"].append(name)
    for i in range(args.videos):
        clip = gen_video_clip(args.seed + i, frames=args.frames, size=args.size)
        clip_dir = out / "videos" / f"clip_{i:04d}"
        clip_dir.mkdir(parents=True, exist_ok=True)
        for k in range(clip.num_frames):
            save_image(clip.frames[k], clip_dir / f"frame_{k:04d}.png")
        for k in range(clip.num_frames - 1):
            write_flow(clip_dir / f"flow_{k:04d}.hcfl", clip.flows[k])
            write_occlusion(clip_dir / f"occ_{k:04d}.hcoc", clip.occlusion[k])
        manifest["videos"].append(f"clip_{i:04d}")
    with open(out / "corpus.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    print(f"wrote {args.images} images, {args.styles} styles, {args.videos} clips to {out}")
    return 0


def _require(path: Path, what: str) -> None:
    if not path.exists():
        raise StateError(f"missing artifact for this stage: {path} ({what})")


def _load_corpus(data_dir: Path):
    _require(data_dir / "images", "content images; run gen-data first")
    content = load_folder(data_dir / "images", "images")
    styles = load_folder(data_dir / "styles", "images")
    return content, styles


def cmd_train(args) -> int:
    config = load_config(args.config)
    if args.data:
        config["data"]["dir"] = args.data
    data_dir = config["data"].get("dir")
    if data_dir is None:
        raise ValueError("no data directory: pass --data or set data.dir in the config")
    data_dir = Path(data_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    models = Models.build(config)
    loaded = models.load_available(out)
    stage = args.stage
    s_cfg = config["stage"]
    weights = LossWeights(**config["losses"])

    if stage == "codec":
        from .codec import train_codec

        content, _ = _load_corpus(data_dir)
        c = config["codec"]
        stats = train_codec(models.codec, content, c["steps"], c["lr"], c["seed"], c["batch_size"])
        models.save_group(out, "codec", seed=c["seed"], step=c["steps"], extra={"stats": stats})
        print(f"codec trained: final loss {stats['final_loss']:.5f}")
        return 0

    if stage == "features":
        from .conditioning import train_feature_net

        _require(data_dir / "corpus.json", "synthetic corpus manifest")
        with open(data_dir / "corpus.json") as f:
            manifest = json.load(f)
        seed, size = manifest["seed"], manifest["size"]
        f_cfg = config["feature_net"]
        styles = [gen_style_image(seed + i, size) for i in range(f_cfg["train_styles"])]
        models.feature_net = train_feature_net(
            styles, f_cfg["steps"], f_cfg["seed"], f_cfg["lr"],
            level_channels=tuple(f_cfg["level_channels"]),
        )
        models.save_group(out, "features", seed=f_cfg["seed"], step=f_cfg["steps"])
        print("feature net trained and frozen")
        return 0

    content, styles = _load_corpus(data_dir)
    _require(out / "codec" / "manifest.json", "train --stage codec first")
    _require(out / "features" / "manifest.json", "train --stage features first")

    if stage == "image":
        cfg = StageConfig(
            stage="image", steps=s_cfg["steps"], batch_size=s_cfg["batch_size"], lr=s_cfg["lr"],
            seed=s_cfg["seed"], supervision_probs=tuple(s_cfg["supervision_probs"]),
            weights=weights, checkpoint_every=s_cfg["checkpoint_every"], log_every=s_cfg["log_every"],
        )
        result = train_stage1(models, content, styles, cfg, out, resume=args.resume)
        print(f"image stage done at step {result['steps']}")
        return 0

    _require(out / "image" / "manifest.json", "train --stage image first")

    if stage.startswith("adapter:"):
        kind = stage.split(":", 1)[1]
        from .adapter import StyleAdapter

        if kind not in models.adapters:
            models.adapters[kind] = StyleAdapter(
                kind, level_channels=models.unet.config.level_channels,
                factor=models.codec.config.downsample_factor, seed=config["adapters"]["seed"],
            )
        cfg = StageConfig(stage="adapter", steps=s_cfg.get("adapter_steps", s_cfg["steps"]),
                          batch_size=s_cfg["batch_size"], lr=s_cfg["lr"], seed=s_cfg["seed"],
                          weights=weights, log_every=s_cfg["log_every"], adapter_kind=kind)
        train_stage2(models, kind, content, styles, cfg, out)
        print(f"adapter {kind} trained")
        return 0

    if stage == "temporal":
        videos = load_folder(data_dir / "videos", "video")
        if len(videos) == 0:
            raise StateError(f"missing artifact for this stage: {data_dir / 'videos'} (no clips)")
        cfg = StageConfig(stage="temporal", steps=s_cfg.get("temporal_steps", s_cfg["steps"]),
                          lr=s_cfg["lr"], seed=s_cfg["seed"], weights=weights,
                          log_every=s_cfg["log_every"], clip_frames=s_cfg["clip_frames"])
        train_stage3(models, videos, styles, cfg, out)
        print("temporal stage done")
        return 0

    raise ValueError(f"unknown stage {args.stage!r}")


def _load_models_for_sampling(ckpt_dir: str) -> Models:
    ckpt_dir = Path(ckpt_dir)
    manifest_path = ckpt_dir / "image" / "manifest.json"
    _require(manifest_path, "a trained image model")
    with open(manifest_path) as f:
        config = json.load(f)["config"]
    models = Models.build(config)
    models.load_available(ckpt_dir)
    return models


def _sample_args_to_settings(args) -> tuple[StyleScalingFactors, SamplerConfig, dict[str, float]]:
    try:
        w = StyleScalingFactors(args.wo, args.wc, args.ws)
    except ValueError as exc:
        raise ValueError(f"{exc} (the style scaling factors must satisfy w_o + w_c + w_s = 1)")
    sampler = SamplerConfig(steps=args.steps, seed=args.seed)
    adapters = _parse_adapter_args(args.adapter or [])
    return w, sampler, adapters


def _sidecar(args, w, sampler, adapters, extra=None) -> dict:
    doc = {
        "schema_version": RUN_SCHEMA,
        "content": args.content or args.content_dir,
        "style": args.style,
        "checkpoint": args.ckpt,
        "weights": {"w_o": w.w_o, "w_c": w.w_c, "w_s": w.w_s},
        "adapters": adapters,
        "steps": sampler.steps,
        "seed": sampler.seed,
    }
    doc.update(extra or {})
    return doc


def cmd_sample(args) -> int:
    w, sampler, adapters = _sample_args_to_settings(args)
    models = _load_models_for_sampling(args.ckpt)
    for kind in adapters:
        if kind not in models.adapters:
            raise ValueError(f"unknown adapter kind {kind!r}: no such trained adapter in {args.ckpt}")
    style = load_image(args.style)
    if args.content_dir:  # video mode
        clips = load_folder(args.content_dir, "video")
        if len(clips) != 1:
            raise ValueError(f"{args.content_dir} must hold exactly one clip of frames")
        out_dir = Path(args.out or "stylized")
        out_dir.mkdir(parents=True, exist_ok=True)
        frames = stylize_video(models, clips[0].frames, style, w, sampler, adapters)
        for k in range(frames.shape[0]):
            save_image(frames[k], out_dir / f"frame_{k:04d}.png")
        sidecar = _sidecar(args, w, sampler, adapters,
                           {"frames": int(frames.shape[0]),
                            "temporal": models.video_unet is not None})
        with open(out_dir / "run.json", "w") as f:
            json.dump(sidecar, f, indent=2, sort_keys=True)
        print(f"wrote {frames.shape[0]} stylized frames to {out_dir}")
        return 0
    content = load_image(args.content)
    out_path = Path(args.out or "stylized.png")
    result = stylize_image(models, content, style, w, sampler, adapters)
    save_image(result, out_path)
    with open(out_path.with_suffix(".json"), "w") as f:
        json.dump(_sidecar(args, w, sampler, adapters), f, indent=2, sort_keys=True)
    print(f"wrote {out_path}")
    return 0


def cmd_sweep(args) -> int:
    from PIL import Image as PILImage, ImageDraw

    from .data import to_uint8

    values = [float(v) for v in args.values.split(",") if v]
    if not values:
        raise ValueError("--values must list at least one number")
    _, sampler, adapters = _sample_args_to_settings(args)
    models = _load_models_for_sampling(args.ckpt)
    style = load_image(args.style)
    content = load_image(args.content)
    out_dir = Path(args.out or "sweep")
    out_dir.mkdir(parents=True, exist_ok=True)

    cells = []
    for v in values:
        if args.axis == "scaling":
            w = StyleScalingFactors(v, (1 - v) / 2, (1 - v) / 2)
            cell_adapters = dict(adapters)
        elif args.axis.startswith("adapter:"):
            kind = args.axis.split(":", 1)[1]
            if kind not in models.adapters:
                raise ValueError(f"unknown adapter kind {kind!r} for sweep axis")
            w = StyleScalingFactors(args.wo, args.wc, args.ws)
            cell_adapters = dict(adapters)
            cell_adapters[kind] = v
        else:
            raise ValueError(f"unknown sweep axis {args.axis!r}")
        result = stylize_image(models, content, style, w, sampler, cell_adapters)
        save_image(result, out_dir / f"cell_{v:g}.png")
        cells.append((v, to_uint8(result)))

    label_h, pad = 12, 2
    h, w_px = cells[0][1].shape[1:]
    grid = PILImage.new("RGB", (len(cells) * (w_px + pad) - pad, h + label_h), "white")
    draw = ImageDraw.Draw(grid)
    for i, (v, cell) in enumerate(cells):
        grid.paste(PILImage.fromarray(cell.transpose(1, 2, 0)), (i * (w_px + pad), label_h))
        draw.text((i * (w_px + pad) + 1, 0), f"{v:g}", fill="black")
    grid.save(out_dir / "grid.png")
    sidecar = _sidecar(args, StyleScalingFactors(args.wo, args.wc, args.ws), sampler, adapters,
                       {"axis": args.axis, "values": values})
    with open(out_dir / "run.json", "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
    print(f"wrote {len(cells)}-cell grid to {out_dir}")
    return 0


def cmd_eval(args) -> int:
    models = _load_models_for_sampling(args.ckpt) if args.ckpt else None
    if models is None or not models.feature_net.frozen:
        raise StateError("eval needs --ckpt pointing at a run with a trained feature net")
    gaps = tuple(int(g) for g in args.gaps.split(",") if g)
    report = eval_report(args.pred, models.feature_net, args.style, args.flows, gaps)
    out_path = Path(args.out or "report.json")
    write_report(report, out_path)
    print(f"wrote {out_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hicast", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--images", type=int, default=256)
    g.add_argument("--styles", type=int, default=64)
    g.add_argument("--videos", type=int, default=16)
    g.add_argument("--frames", type=int, default=8)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--force", action="store_true")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", required=True,
                   help="codec | features | image | adapter:KIND | temporal")
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--data")
    t.add_argument("--resume")
    t.set_defaults(fn=cmd_train)

    def sampling_flags(sp, video_ok=True):
        sp.add_argument("--content")
        if video_ok:
            sp.add_argument("--content-dir", dest="content_dir")
        sp.add_argument("--style", required=True)
        sp.add_argument("--ckpt", required=True)
        sp.add_argument("--wo", type=float, default=1.0)
        sp.add_argument("--wc", type=float, default=0.0)
        sp.add_argument("--ws", type=float, default=0.0)
        sp.add_argument("--adapter", action="append", metavar="KIND:WEIGHT")
        sp.add_argument("--steps", type=int, default=20)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out")

    s = sub.add_parser("sample", help="stylize an image or a clip")
    sampling_flags(s)
    s.set_defaults(fn=cmd_sample)

    sw = sub.add_parser("sweep", help="grid over guidance or adapter weights")
    sampling_flags(sw, video_ok=False)
    sw.add_argument("--axis", required=True, help="scaling | adapter:KIND")
    sw.add_argument("--values", required=True, help="comma-separated values")
    sw.set_defaults(fn=cmd_sweep, content_dir=None)

    e = sub.add_parser("eval", help="metric report over a prediction folder")
    e.add_argument("--pred", required=True)
    e.add_argument("--style")
    e.add_argument("--flows")
    e.add_argument("--gaps", default="1")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--out")
    e.set_defaults(fn=cmd_eval)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "command", None) == "sample" and not (args.content or args.content_dir):
        print("error: sample needs --content or --content-dir", file=sys.stderr)
        return 2
    try:
        return args.fn(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (StateError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
