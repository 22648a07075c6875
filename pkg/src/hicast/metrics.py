"""Quantitative evaluation: Gram-matrix style distance, flow-warped temporal
consistency, and a small perceptual distance built on the frozen feature net.

These numbers are internally comparable only; they are not on the scale of
metrics computed with large pretrained networks.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .conditioning import FeatureNet
from .data import Image, VideoClip, compose_flow, load_folder, warp
from .errors import StateError

REPORT_SCHEMA = "hicast-eval/1"


def _as_tensor(image) -> torch.Tensor:
    px = image.pixels if isinstance(image, Image) else image
    if isinstance(px, torch.Tensor):
        return px
    return torch.from_numpy(np.ascontiguousarray(px, dtype=np.float32))


def gram_loss(out, style, net: FeatureNet) -> float:
    """Sum over levels of MSE between Gram matrices G = F F^T / (C*H*W)."""
    with torch.no_grad():
        f_out = net.features(_as_tensor(out)[None])
        f_sty = net.features(_as_tensor(style)[None])
    total = 0.0
    for a, b in zip(f_out, f_sty):
        ga = _gram(a[0])
        gb = _gram(b[0])
        total += float(((ga - gb) ** 2).mean())
    return total


def _gram(feats: torch.Tensor) -> torch.Tensor:
    c, h, w = feats.shape
    flat = feats.reshape(c, h * w)
    return (flat @ flat.T) / (c * h * w)


def temporal_loss(
    frames: np.ndarray,
    flows: np.ndarray | None,
    occlusion: np.ndarray | None,
    i: int = 1,
) -> float:
    """RMS flow-warped difference at frame gap i.

    For each pair (t-i, t), frame t is backward-warped through the composed
    flow to frame t-i's coordinates and compared on pixels valid along the
    whole chain; the mean squared difference over pairs is then square-rooted.
    """
    if flows is None or occlusion is None:
        raise StateError("temporal metric requires flows; this clip has none")
    n = frames.shape[0]
    if not 1 <= i < n:
        raise ValueError(f"frame gap {i} must be in [1, {n - 1}]")
    sq_sum = 0.0
    pairs = 0
    for t0 in range(n - i):
        flow, valid = compose_flow(flows, occlusion, t0, i)
        warped = warp(frames[t0 + i], flow)
        mask = valid.astype(bool)
        if not mask.any():
            continue
        diff = (warped - frames[t0])[:, mask]
        sq_sum += float((diff**2).mean())
        pairs += 1
    return float(np.sqrt(sq_sum / pairs)) if pairs else 0.0


def clip_temporal_loss(pred_frames: np.ndarray, content_clip: VideoClip, i: int = 1) -> float:
    """Temporal loss of predicted frames under the content clip's flows."""
    return temporal_loss(pred_frames, content_clip.flows, content_clip.occlusion, i)


def perceptual_distance(a, b, net: FeatureNet) -> float:
    """Mean over levels of MSE between channel-unit-normalized features."""
    with torch.no_grad():
        f_a = net.features(_as_tensor(a)[None])
        f_b = net.features(_as_tensor(b)[None])
    total = 0.0
    for fa, fb in zip(f_a, f_b):
        ua = fa / fa.norm(dim=1, keepdim=True).clamp_min(1e-12)
        ub = fb / fb.norm(dim=1, keepdim=True).clamp_min(1e-12)
        total += float(((ua - ub) ** 2).mean())
    return total / len(f_a)


def eval_report(
    pred_dir: str | Path,
    net: FeatureNet,
    style_path: str | Path | None = None,
    flow_dir: str | Path | None = None,
    gaps: tuple[int, ...] = (1,),
) -> dict:
    """Corpus metrics over a prediction folder.

    Flat PNGs are scored as images; subfolders are scored as clips (their
    frames also contribute to the image metrics). A metric whose inputs are
    missing is reported as null with a reason.
    """
    pred_dir = Path(pred_dir)
    images = list(load_folder(pred_dir, "images").items)
    clips = [d for d in sorted(pred_dir.iterdir()) if d.is_dir()] if pred_dir.is_dir() else []

    report: dict = {"schema_version": REPORT_SCHEMA, "pred_dir": str(pred_dir)}
    all_images = list(images)
    clip_frames: dict[str, np.ndarray] = {}
    for clip_dir in clips:
        ds = load_folder(clip_dir, "video")
        if len(ds) != 1:
            continue
        clip = ds[0]
        clip_frames[clip_dir.name] = clip.frames
        for k, frame in enumerate(clip.frames):
            all_images.append(Image(frame, f"{clip_dir.name}/{k:04d}"))

    if style_path is None:
        report["gram_loss"] = None
        report["perceptual"] = None
        report["reason_style"] = "no style image provided"
    else:
        from .data import load_image

        style = load_image(style_path)
        per_gram = {img.id: gram_loss(img, style, net) for img in all_images}
        per_perc = {img.id: perceptual_distance(img, style, net) for img in all_images}
        report["gram_loss"] = {
            "mean": float(np.mean(list(per_gram.values()))) if per_gram else None,
            "per_item": per_gram,
        }
        report["perceptual"] = {
            "mean": float(np.mean(list(per_perc.values()))) if per_perc else None,
            "per_item": per_perc,
        }

    temporal: dict = {}
    if flow_dir is None:
        report["temporal"] = None
        report["reason_temporal"] = "no flow directory provided"
    else:
        flow_dir = Path(flow_dir)
        for gap in gaps:
            per_item = {}
            for name, frames in clip_frames.items():
                src = flow_dir / name if (flow_dir / name).is_dir() else flow_dir
                ref = load_folder(src, "video")
                if len(ref) != 1 or not ref[0].has_flows:
                    per_item[name] = None
                    continue
                if frames.shape[0] <= gap:
                    per_item[name] = None
                    continue
                per_item[name] = temporal_loss(frames, ref[0].flows, ref[0].occlusion, gap)
            values = [v for v in per_item.values() if v is not None]
            temporal[str(gap)] = {
                "mean": float(np.mean(values)) if values else None,
                "per_item": per_item,
            }
        report["temporal"] = temporal
    return report


def write_report(report: dict, path: str | Path) -> None:
    with open(path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
