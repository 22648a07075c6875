"""Procedural training corpus: content scenes, style textures, and video clips
with exact analytic optical flow, plus control-map annotators and folder I/O.

All pixel data is float32 in [-1, 1], channel-first. PNG files are 8-bit RGB
and map linearly to that range. Flow files use the "HCFL" format and occlusion
masks the "HCOC" format (see `write_flow` / `write_occlusion`).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from .errors import FormatError

STYLE_FAMILIES = ("stripes", "stippling", "swirls", "blocks")
CONTROL_KINDS = ("edge", "depth", "segmentation")

# Fixed 8-entry label palette for segmentation maps.
SEG_PALETTE = np.linspace(0.0, 1.0, 8)


@dataclass
class Image:
    """A single RGB image, channel-first float32 in [-1, 1].

    `meta` carries generator ground truth (object geometry, depth order,
    style palette) when the image is synthetic; ingested images have none.
    """

    pixels: np.ndarray
    id: str
    meta: dict | None = None

    @property
    def size(self) -> int:
        return self.pixels.shape[-1]


@dataclass
class VideoClip:
    """Frame stack [N, 3, H, W] with per-step forward flow and validity masks.

    `flows[t]` holds the displacement (channel 0 = x, channel 1 = y, pixels)
    of the content visible at each pixel of frame t on its way to frame t+1.
    `occlusion[t]` is 1 where that content is still visible in frame t+1 and
    0 where it leaves the frame or gets covered. Both are None for ingested
    clips without ground truth.
    """

    frames: np.ndarray
    flows: np.ndarray | None
    occlusion: np.ndarray | None
    id: str
    meta: dict | None = None

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def has_flows(self) -> bool:
        return self.flows is not None


@dataclass
class ControlMap:
    kind: str
    map: np.ndarray  # [1 or 3, H, W] in [0, 1]


@dataclass
class _SceneObject:
    shape: str  # disc | rect | triangle
    params: dict
    color: np.ndarray  # [3] in [-1, 1]
    velocity: tuple[int, int] = (0, 0)  # (vx, vy) pixels per frame

    def mask(self, yy: np.ndarray, xx: np.ndarray, t: int = 0) -> np.ndarray:
        """Boolean occupancy at frame t (object translated by t * velocity)."""
        dx = self.velocity[0] * t
        dy = self.velocity[1] * t
        p = self.params
        if self.shape == "disc":
            return (yy - p["cy"] - dy) ** 2 + (xx - p["cx"] - dx) ** 2 <= p["r"] ** 2
        if self.shape == "rect":
            return (np.abs(yy - p["cy"] - dy) <= p["hh"]) & (
                np.abs(xx - p["cx"] - dx) <= p["hw"]
            )
        if self.shape == "triangle":
            verts = np.asarray(p["verts"], dtype=np.float64) + [dy, dx]
            signs = []
            for i in range(3):
                ay, ax = verts[i]
                by, bx = verts[(i + 1) % 3]
                signs.append((bx - ax) * (yy - ay) - (by - ay) * (xx - ax))
            signs = np.stack(signs)
            return np.all(signs >= 0, axis=0) | np.all(signs <= 0, axis=0)
        raise ValueError(f"unknown shape {self.shape!r}")


def _grid(size: int, scale: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-center coordinates; scale > 1 gives a supersampled grid in the
    same coordinate units."""
    yy, xx = np.mgrid[0 : size * scale, 0 : size * scale].astype(np.float64)
    return yy / scale, xx / scale


def _box_down(pixels: np.ndarray, scale: int) -> np.ndarray:
    """Average scale x scale blocks of a [C, H*s, W*s] array down to [C, H, W]."""
    if scale == 1:
        return pixels
    c, hs, ws = pixels.shape
    h, w = hs // scale, ws // scale
    return pixels.reshape(c, h, scale, w, scale).mean(axis=(2, 4))


def _gradient_background(rng: np.random.Generator, size: int) -> np.ndarray:
    c0 = rng.uniform(-0.9, 0.9, 3)
    c1 = rng.uniform(-0.9, 0.9, 3)
    yy, xx = _grid(size)
    axis = rng.integers(0, 3)
    if axis == 0:
        w = xx / max(size - 1, 1)
    elif axis == 1:
        w = yy / max(size - 1, 1)
    else:
        w = (xx + yy) / max(2 * (size - 1), 1)
    return (c0[:, None, None] * (1 - w) + c1[:, None, None] * w).astype(np.float32)


def _sample_objects(rng: np.random.Generator, size: int) -> list[_SceneObject]:
    n = int(rng.integers(2, 6))
    objects = []
    for _ in range(n):
        shape = str(rng.choice(["disc", "rect", "triangle"]))
        color = rng.uniform(-1.0, 1.0, 3)
        cy = float(rng.uniform(0.2, 0.8) * size)
        cx = float(rng.uniform(0.2, 0.8) * size)
        if shape == "disc":
            params = {"cy": cy, "cx": cx, "r": float(rng.uniform(0.08, 0.22) * size)}
        elif shape == "rect":
            params = {
                "cy": cy,
                "cx": cx,
                "hh": float(rng.uniform(0.06, 0.2) * size),
                "hw": float(rng.uniform(0.06, 0.2) * size),
            }
        else:
            r = rng.uniform(0.1, 0.25) * size
            angles = rng.uniform(0, 2 * np.pi) + np.array([0, 2.1, 4.2])
            verts = [(cy + r * np.sin(a), cx + r * np.cos(a)) for a in angles]
            params = {"verts": verts}
        objects.append(_SceneObject(shape, params, color.astype(np.float32)))
    return objects


def compose_scene(
    objects: list[_SceneObject], background: np.ndarray, t: int = 0, supersample: int = 1
) -> tuple[np.ndarray, np.ndarray]:
    """Render objects over a background at frame t.

    Returns (pixels [3,H,W], labels [H,W]) where label 0 is background and
    label k is the k-th object; later objects are drawn on top (nearer).
    Labels are always rasterized at pixel centers; `supersample` > 1
    antialiases the pixels only (video frames keep hard edges so analytic
    flows stay exact).
    """
    size = background.shape[-1]
    yy, xx = _grid(size, supersample)
    pixels = np.repeat(np.repeat(background, supersample, axis=1), supersample, axis=2)
    yyc, xxc = _grid(size)
    labels = np.zeros((size, size), dtype=np.int64)
    for k, obj in enumerate(objects, start=1):
        m = obj.mask(yy, xx, t)
        pixels[:, m] = obj.color[:, None]
        labels[obj.mask(yyc, xxc, t)] = k
    return _box_down(pixels, supersample).astype(np.float32), labels


def _check_size(size: int, factor: int) -> None:
    if size < 16:
        raise ValueError(f"size must be >= 16, got {size}")
    if size % factor != 0:
        raise ValueError(f"size {size} not divisible by codec factor {factor}")


def gen_content_image(seed: int, size: int = 32, factor: int = 4) -> Image:
    """Deterministic scene of 2-5 geometric objects on a gradient background."""
    _check_size(size, factor)
    rng = np.random.default_rng((0xC0, seed, size))
    background = _gradient_background(rng, size)
    objects = _sample_objects(rng, size)
    pixels, labels = compose_scene(objects, background, supersample=2)
    meta = {
        "objects": objects,
        "labels": labels,
        # draw order == depth order: index k is nearer than k-1
        "depth_order": list(range(1, len(objects) + 1)),
    }
    return Image(np.clip(pixels, -1, 1), f"content-{seed:08d}", meta)


def _style_palette(rng: np.random.Generator, family: str) -> np.ndarray:
    if family == "stippling":
        base = rng.uniform(-1.0, -0.3, 3)
        dots = rng.uniform(0.2, 1.0, (3, 3))
        return np.vstack([base, dots]).astype(np.float32)
    if family == "swirls":
        start = rng.uniform(-0.9, 0.0, 3)
        step = rng.uniform(0.2, 0.5, 3)
        return np.stack([start + i * step for i in range(4)]).clip(-1, 1).astype(np.float32)
    return rng.uniform(-1.0, 1.0, (4, 3)).astype(np.float32)


def gen_style_image(seed: int, size: int = 32, factor: int = 4) -> Image:
    """Deterministic texture from one of four procedural style families."""
    _check_size(size, factor)
    rng = np.random.default_rng((0x57, seed, size))
    family = STYLE_FAMILIES[int(rng.integers(0, len(STYLE_FAMILIES)))]
    palette = _style_palette(rng, family)
    k = len(palette)
    ss = 2
    yy, xx = _grid(size, ss)

    if family == "stripes":
        theta = rng.uniform(0, np.pi)
        width = rng.uniform(4.0, 8.0)
        proj = xx * np.cos(theta) + yy * np.sin(theta)
        idx = np.floor(proj / width).astype(int) % k
    elif family == "stippling":
        # dots on a jittered grid (keeps the texture compressible)
        idx = np.zeros((size * ss, size * ss), dtype=int)
        cell = int(rng.integers(6, 11))
        for gy in range(0, size, cell):
            for gx in range(0, size, cell):
                cy = gy + cell / 2 + rng.uniform(-cell / 4, cell / 4)
                cx = gx + cell / 2 + rng.uniform(-cell / 4, cell / 4)
                r = rng.uniform(1.5, cell / 2.5)
                m = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
                idx[m] = int(rng.integers(1, k))
    elif family == "swirls":
        cy, cx = rng.uniform(0.3, 0.7, 2) * size
        theta = np.arctan2(yy - cy, xx - cx)
        rad = np.hypot(yy - cy, xx - cx)
        period = rng.uniform(8.0, 16.0)
        idx = np.floor((theta / (2 * np.pi) + rad / period) * k).astype(int) % k
    else:  # blocks
        cell = int(rng.integers(5, 12))
        grid_colors = rng.integers(0, k, (size // cell + 2, size // cell + 2))
        idx = grid_colors[(yy / cell).astype(int), (xx / cell).astype(int)]

    pixels = _box_down(palette[idx].transpose(2, 0, 1), ss)
    pixels = ndimage.gaussian_filter(pixels, sigma=(0, 0.5, 0.5), mode="nearest")
    pixels = pixels.astype(np.float32)
    meta = {"family": family, "palette": palette}
    return Image(pixels, f"style-{family}-{seed:08d}", meta)


def gen_video_clip(
    seed: int, frames: int = 8, size: int = 32, factor: int = 4, max_speed: int = 2
) -> VideoClip:
    """Clip of translating objects with exact per-step flow and occlusion.

    Velocities are integer pixels per frame (so backward warping is exact on
    valid pixels) and bounded by `max_speed`; `max_speed=0` gives a static
    clip. The background is static.
    """
    if frames < 2:
        raise ValueError(f"a clip needs at least 2 frames, got {frames}")
    _check_size(size, factor)
    rng = np.random.default_rng((0xC1, seed, size))
    background = _gradient_background(rng, size)
    objects = _sample_objects(rng, size)
    for obj in objects:
        vx = int(rng.integers(-max_speed, max_speed + 1))
        vy = int(rng.integers(-max_speed, max_speed + 1))
        obj.velocity = (vx, vy)

    frame_px = []
    frame_labels = []
    for t in range(frames):
        px, lab = compose_scene(objects, background, t)
        frame_px.append(np.clip(px, -1, 1))
        frame_labels.append(lab)
    stack = np.stack(frame_px)

    velocities = np.zeros((len(objects) + 1, 2), dtype=np.float32)  # row 0: background
    for k, obj in enumerate(objects, start=1):
        velocities[k] = obj.velocity

    h = w = size
    yy, xx = _grid(size)
    flows = np.zeros((frames - 1, 2, h, w), dtype=np.float32)
    occ = np.zeros((frames - 1, h, w), dtype=np.uint8)
    for t in range(frames - 1):
        lab = frame_labels[t]
        v = velocities[lab]  # [H, W, 2] (vx, vy)
        flows[t, 0] = v[..., 0]
        flows[t, 1] = v[..., 1]
        ty = yy + v[..., 1]
        tx = xx + v[..., 0]
        inside = (ty >= 0) & (ty <= h - 1) & (tx >= 0) & (tx <= w - 1)
        tyc = np.clip(ty, 0, h - 1).astype(int)
        txc = np.clip(tx, 0, w - 1).astype(int)
        same = frame_labels[t + 1][tyc, txc] == lab
        occ[t] = (inside & same).astype(np.uint8)

    meta = {"objects": objects, "labels_per_frame": frame_labels}
    return VideoClip(stack, flows, occ, f"clip-{seed:08d}", meta)


# ---------------------------------------------------------------------------
# Control-map annotators
# ---------------------------------------------------------------------------

def _luminance(pixels: np.ndarray) -> np.ndarray:
    return pixels.mean(axis=0)


def _kmeans_labels(pixels: np.ndarray, k: int = 8, iters: int = 12) -> np.ndarray:
    """Deterministic Lloyd clustering of RGB pixels (no RNG: rank-based init)."""
    h, w = pixels.shape[1:]
    pts = pixels.reshape(3, -1).T.astype(np.float64)
    uniq = np.unique(pts, axis=0)
    k = min(k, len(uniq))
    order = np.argsort(uniq.sum(axis=1), kind="stable")
    centers = uniq[order[np.linspace(0, len(uniq) - 1, k).round().astype(int)]]
    for _ in range(iters):
        d = ((pts[:, None, :] - centers[None]) ** 2).sum(axis=2)
        assign = d.argmin(axis=1)
        for j in range(k):
            sel = assign == j
            if sel.any():
                centers[j] = pts[sel].mean(axis=0)
    # stable label ids: sort clusters by center luminance
    lum_order = np.argsort(centers.sum(axis=1), kind="stable")
    remap = np.empty(k, dtype=int)
    remap[lum_order] = np.arange(k)
    return remap[assign].reshape(h, w)


def annotate(image: Image, kind: str) -> ControlMap:
    """Extract a structural control map from an image.

    Edge maps are normalized Sobel gradient magnitude. Depth and segmentation
    come from generator metadata when present; for ingested images they fall
    back to documented proxies (smoothed luminance, color quantization).
    """
    if kind not in CONTROL_KINDS:
        raise ValueError(f"unknown control kind {kind!r}; expected one of {CONTROL_KINDS}")
    px = image.pixels
    h, w = px.shape[1:]

    if kind == "edge":
        lum = _luminance(px)
        gx = ndimage.sobel(lum, axis=1)
        gy = ndimage.sobel(lum, axis=0)
        mag = np.hypot(gx, gy)
        peak = mag.max()
        out = mag / peak if peak > 1e-12 else np.zeros_like(mag)
        return ControlMap("edge", out[None].astype(np.float32))

    meta = image.meta or {}
    labels = meta.get("labels")

    if kind == "depth":
        if labels is not None:
            n = max(len(meta["depth_order"]), 1)
            out = np.where(labels > 0, labels / n, 0.0)
        else:
            lum01 = (_luminance(px) + 1.0) / 2.0
            sm = ndimage.gaussian_filter(lum01, sigma=max(1.0, h / 16))
            span = sm.max() - sm.min()
            out = (sm - sm.min()) / span if span > 1e-12 else np.zeros_like(sm)
        return ControlMap("depth", out[None].astype(np.float32))

    # segmentation
    if labels is not None:
        out = SEG_PALETTE[labels]
    else:
        out = SEG_PALETTE[_kmeans_labels(px)]
    return ControlMap("segmentation", out[None].astype(np.float32))


# ---------------------------------------------------------------------------
# Warping and flow composition (single shared implementation)
# ---------------------------------------------------------------------------

def warp(image: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Backward-warp an image [C,H,W] by a flow field [2,H,W] (x, y).

    out(y, x) = bilinear sample of `image` at (y + flow_y, x + flow_x), with
    coordinates clamped to the frame; out-of-frame samples are handled by the
    caller's validity mask.
    """
    c, h, w = image.shape
    yy, xx = _grid(h)
    sy = np.clip(yy + flow[1], 0, h - 1)
    sx = np.clip(xx + flow[0], 0, w - 1)
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = sy - y0
    wx = sx - x0
    out = (
        image[:, y0, x0] * (1 - wy) * (1 - wx)
        + image[:, y0, x1] * (1 - wy) * wx
        + image[:, y1, x0] * wy * (1 - wx)
        + image[:, y1, x1] * wy * wx
    )
    return out.astype(image.dtype)


def compose_flow(
    flows: np.ndarray, occlusion: np.ndarray, start: int, gap: int
) -> tuple[np.ndarray, np.ndarray]:
    """Chain forward flows over `gap` steps starting at frame `start`.

    Returns the composed displacement anchored at frame `start` and a
    validity mask that is 1 only where every step along the chain stayed
    visible (occlusion is OR-accumulated). Lookups are bilinear, with
    conservative validity (interpolated mask must stay ~1).
    """
    h, w = flows.shape[2:]
    total = np.zeros((2, h, w), dtype=np.float64)
    valid = np.ones((h, w), dtype=np.float64)
    for s in range(gap):
        step = flows[start + s].astype(np.float64)
        occ = occlusion[start + s].astype(np.float64)
        stepped = warp(np.concatenate([step, occ[None]]), total.astype(np.float32))
        valid = valid * occlusion[start + s] if s == 0 else valid * (stepped[2] > 0.999)
        flow_here = step if s == 0 else stepped[:2]
        total = total + flow_here
    return total.astype(np.float32), (valid > 0.5).astype(np.uint8)


# ---------------------------------------------------------------------------
# PNG / flow-file I/O
# ---------------------------------------------------------------------------

def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.clip((pixels + 1.0) * 127.5, 0, 255).round().astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return (arr.astype(np.float32) / 127.5) - 1.0


def save_image(image: Image | np.ndarray, path: str | Path) -> None:
    px = image.pixels if isinstance(image, Image) else image
    PILImage.fromarray(to_uint8(px).transpose(1, 2, 0)).save(path, format="PNG")


def load_image(path: str | Path) -> Image:
    path = Path(path)
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    except Exception as exc:
        raise OSError(f"cannot read image file {path}") from exc
    return Image(from_uint8(arr.transpose(2, 0, 1)), path.stem)


_FLOW_MAGIC = b"HCFL"
_OCC_MAGIC = b"HCOC"


def write_flow(path: str | Path, flow: np.ndarray) -> None:
    """Write a [2,H,W] flow as: magic "HCFL", u32 H, u32 W, float32[H,W,2] (x,y)."""
    h, w = flow.shape[1:]
    data = flow.transpose(1, 2, 0).astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(struct.pack("<4sII", _FLOW_MAGIC, h, w))
        f.write(data)


def read_flow(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(12)
        if len(header) != 12 or header[:4] != _FLOW_MAGIC:
            raise FormatError(f"{path}: not a flow file (bad magic)")
        _, h, w = struct.unpack("<4sII", header)
        data = np.frombuffer(f.read(8 * h * w), dtype="<f4")
    if data.size != 2 * h * w:
        raise FormatError(f"{path}: truncated flow payload")
    return data.reshape(h, w, 2).transpose(2, 0, 1).copy()


def write_occlusion(path: str | Path, occ: np.ndarray) -> None:
    """Write a [H,W] validity mask as: magic "HCOC", u32 H, u32 W, H*W bytes."""
    h, w = occ.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<4sII", _OCC_MAGIC, h, w))
        f.write(occ.astype(np.uint8).tobytes())


def read_occlusion(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(12)
        if len(header) != 12 or header[:4] != _OCC_MAGIC:
            raise FormatError(f"{path}: not an occlusion file (bad magic)")
        _, h, w = struct.unpack("<4sII", header)
        data = np.frombuffer(f.read(h * w), dtype=np.uint8)
    if data.size != h * w:
        raise FormatError(f"{path}: truncated occlusion payload")
    if not np.isin(data, (0, 1)).all():
        raise FormatError(f"{path}: occlusion bytes must be 0 or 1")
    return data.reshape(h, w).copy()


# ---------------------------------------------------------------------------
# Folder ingestion
# ---------------------------------------------------------------------------

@dataclass
class ImageDataset:
    items: list[Image] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, i: int) -> Image:
        return self.items[i]


@dataclass
class VideoDataset:
    items: list[VideoClip] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, i: int) -> VideoClip:
        return self.items[i]


def _load_clip_dir(clip_dir: Path) -> VideoClip:
    frame_paths = sorted(clip_dir.glob("*.png"))
    frames = []
    for p in frame_paths:
        img = load_image(p)
        if frames and img.pixels.shape != frames[0].shape:
            raise FormatError(
                f"{p}: frame size {img.pixels.shape[1:]} differs from "
                f"{frames[0].shape[1:]} earlier in clip {clip_dir.name}"
            )
        frames.append(img.pixels)
    n = len(frames)
    flow_paths = sorted(clip_dir.glob("*.hcfl"))
    occ_paths = sorted(clip_dir.glob("*.hcoc"))
    flows = occ = None
    if flow_paths or occ_paths:
        if len(flow_paths) != n - 1 or len(occ_paths) != n - 1:
            raise FormatError(
                f"{clip_dir}: expected {n - 1} flow/occlusion files, found "
                f"{len(flow_paths)}/{len(occ_paths)}"
            )
        flows = np.stack([read_flow(p) for p in flow_paths])
        occ = np.stack([read_occlusion(p) for p in occ_paths])
    return VideoClip(np.stack(frames), flows, occ, clip_dir.name)


def load_folder(path: str | Path, kind: str) -> ImageDataset | VideoDataset:
    """Ingest a folder of PNGs (kind="images") or clip subfolders (kind="video").

    Ordering is lexicographic by filename. Clips without flow files are
    marked flow-absent; the temporal metric refuses them.
    """
    path = Path(path)
    if not path.is_dir():
        raise OSError(f"dataset folder does not exist: {path}")
    if kind == "images":
        return ImageDataset([load_image(p) for p in sorted(path.glob("*.png"))])
    if kind == "video":
        subdirs = sorted(d for d in path.iterdir() if d.is_dir())
        if not subdirs and any(path.glob("*.png")):
            subdirs = [path]  # the folder itself is a single clip
        return VideoDataset([_load_clip_dir(d) for d in subdirs])
    raise ValueError(f"unknown dataset kind {kind!r}; expected 'images' or 'video'")
