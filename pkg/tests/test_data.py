import numpy as np
import pytest
from scipy.optimize import linprog

import hicast as hc
from hicast.data import (
    compose_scene,
    load_folder,
    load_image,
    read_flow,
    read_occlusion,
    save_image,
    warp,
    write_flow,
    write_occlusion,
    _gradient_background,
    _SceneObject,
)
from hicast.errors import FormatError


class TestContentGenerator:
    def test_deterministic_bit_identical(self):
        a = hc.gen_content_image(0, 32)
        b = hc.gen_content_image(0, 32)
        assert a.pixels.shape == (3, 32, 32)
        assert np.array_equal(a.pixels, b.pixels)
        assert a.id == b.id

    def test_different_seeds_differ(self):
        a = hc.gen_content_image(0, 32)
        b = hc.gen_content_image(1, 32)
        frac = np.mean(np.any(np.abs(a.pixels - b.pixels) > 1e-6, axis=0))
        assert frac >= 0.01

    def test_indivisible_size_rejected(self):
        with pytest.raises(ValueError):
            hc.gen_content_image(7, 30, factor=4)

    def test_small_size_rejected(self):
        with pytest.raises(ValueError):
            hc.gen_content_image(0, 12)

    def test_range_and_finite(self):
        img = hc.gen_content_image(5, 32)
        assert np.isfinite(img.pixels).all()
        assert img.pixels.min() >= -1 and img.pixels.max() <= 1


class TestStyleGenerator:
    def test_channel_means_inside_palette_hull(self):
        # membership via LP feasibility: mean = palette^T lambda, lambda >= 0, sum 1
        img = hc.gen_style_image(3, 32)
        palette = img.meta["palette"].astype(np.float64)
        mean = img.pixels.mean(axis=(1, 2)).astype(np.float64)
        k = len(palette)
        a_eq = np.vstack([palette.T, np.ones(k)])
        b_eq = np.concatenate([mean, [1.0]])
        res = linprog(np.zeros(k), A_eq=a_eq, b_eq=b_eq, bounds=[(0, 1)] * k, method="highs")
        assert res.success, f"channel mean {mean} escaped the palette hull"

    def test_same_seed_identical(self):
        assert np.array_equal(hc.gen_style_image(9, 32).pixels, hc.gen_style_image(9, 32).pixels)

    def test_all_families_occur(self):
        families = {hc.gen_style_image(i, 32).meta["family"] for i in range(1000)}
        assert families == set(hc.data.STYLE_FAMILIES)

    def test_family_recorded_in_id(self):
        img = hc.gen_style_image(11, 32)
        assert img.meta["family"] in img.id


class TestVideoGenerator:
    def test_static_clip(self):
        clip = hc.gen_video_clip(0, frames=4, size=32, max_speed=0)
        assert np.all(clip.flows == 0)
        assert np.all(clip.occlusion == 1)
        assert np.array_equal(clip.frames[0], clip.frames[-1])

    def test_shapes(self):
        clip = hc.gen_video_clip(0, frames=8, size=32)
        assert clip.flows.shape == (7, 2, 32, 32)
        assert clip.occlusion.shape == (7, 32, 32)
        assert clip.frames.shape == (8, 3, 32, 32)

    def test_too_few_frames(self):
        with pytest.raises(ValueError):
            hc.gen_video_clip(0, frames=1, size=32)

    @pytest.mark.parametrize("seed", [0, 1, 2, 3])
    def test_warp_consistency(self, seed):
        # backward-warping the next frame by the flow reproduces the current
        # frame on valid pixels (integer motion + hard edges: exact)
        clip = hc.gen_video_clip(seed, frames=6, size=32)
        for t in range(clip.num_frames - 1):
            mask = clip.occlusion[t].astype(bool)
            if not mask.any():
                continue
            warped = warp(clip.frames[t + 1], clip.flows[t])
            err = np.abs(warped - clip.frames[t])[:, mask].max()
            assert err < 1e-5

    def test_flow_magnitude_bound(self):
        clip = hc.gen_video_clip(4, frames=8, size=32)
        assert np.abs(clip.flows).max() <= 32 / 4

    def test_compose_flow_two_steps(self):
        clip = hc.gen_video_clip(2, frames=5, size=32)
        from hicast.data import compose_flow

        flow, valid = compose_flow(clip.flows, clip.occlusion, 0, 2)
        mask = valid.astype(bool)
        if mask.any():
            warped = warp(clip.frames[2], flow)
            assert np.abs(warped - clip.frames[0])[:, mask].max() < 1e-5


class TestAnnotators:
    def test_edge_constant_image_is_zero(self):
        img = hc.Image(np.full((3, 32, 32), 0.25, dtype=np.float32), "const")
        cm = hc.annotate(img, "edge")
        assert cm.map.shape == (1, 32, 32)
        assert np.all(cm.map == 0)

    def test_single_disc_segmentation_two_labels(self):
        bg = np.zeros((3, 32, 32), dtype=np.float32)
        disc = _SceneObject("disc", {"cy": 16.0, "cx": 16.0, "r": 6.0}, np.ones(3, np.float32))
        pixels, labels = compose_scene([disc], bg)
        img = hc.Image(pixels, "one-disc", {"objects": [disc], "labels": labels, "depth_order": [1]})
        cm = hc.annotate(img, "segmentation")
        assert len(np.unique(cm.map)) == 2

    def test_depth_matches_generator_order(self):
        img = hc.gen_content_image(1, 32)
        cm = hc.annotate(img, "depth")
        labels = img.meta["labels"]
        n = len(img.meta["depth_order"])
        for k in range(n + 1):
            region = cm.map[0][labels == k]
            if region.size:
                expected = 0.0 if k == 0 else k / n
                assert np.allclose(region, expected)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            hc.annotate(hc.gen_content_image(0, 32), "normals")

    def test_depends_only_on_pixels_not_id(self):
        img = hc.gen_content_image(2, 32)
        renamed = hc.Image(img.pixels.copy(), "other-name", img.meta)
        for kind in ("edge", "depth", "segmentation"):
            assert np.array_equal(hc.annotate(img, kind).map, hc.annotate(renamed, kind).map)

    def test_proxy_annotators_for_ingested_images(self):
        img = hc.Image(hc.gen_content_image(3, 32).pixels, "ingested")  # no meta
        depth = hc.annotate(img, "depth")
        seg = hc.annotate(img, "segmentation")
        assert depth.map.min() >= 0 and depth.map.max() <= 1
        assert len(np.unique(seg.map)) <= 8

    def test_maps_match_source_size(self):
        img = hc.gen_content_image(4, 64)
        for kind in ("edge", "depth", "segmentation"):
            assert hc.annotate(img, kind).map.shape[-2:] == (64, 64)


class TestFlowFiles:
    def test_roundtrip_exact(self, tmp_path):
        flow = np.random.default_rng(0).normal(size=(2, 16, 16)).astype(np.float32)
        write_flow(tmp_path / "f.hcfl", flow)
        assert np.array_equal(read_flow(tmp_path / "f.hcfl"), flow)

    def test_flow_layout_channel_last_xy(self, tmp_path):
        flow = np.zeros((2, 2, 2), dtype=np.float32)
        flow[0, 0, 1] = 3.0  # x displacement at (y=0, x=1)
        write_flow(tmp_path / "f.hcfl", flow)
        raw = (tmp_path / "f.hcfl").read_bytes()
        assert raw[:4] == b"HCFL"
        data = np.frombuffer(raw[12:], dtype="<f4").reshape(2, 2, 2)
        assert data[0, 1, 0] == 3.0  # row 0, col 1, channel x

    def test_occlusion_roundtrip(self, tmp_path):
        occ = (np.random.default_rng(1).random((8, 8)) > 0.5).astype(np.uint8)
        write_occlusion(tmp_path / "o.hcoc", occ)
        assert np.array_equal(read_occlusion(tmp_path / "o.hcoc"), occ)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "bad.hcfl").write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(FormatError):
            read_flow(tmp_path / "bad.hcfl")
        with pytest.raises(FormatError):
            read_occlusion(tmp_path / "bad.hcfl")


class TestFolderIngestion:
    def test_sorted_and_mapped(self, tmp_path):
        for name in ("c.png", "a.png", "b.png"):
            save_image(hc.gen_content_image(ord(name[0]), 32), tmp_path / name)
        ds = load_folder(tmp_path, "images")
        assert len(ds) == 3
        assert [img.id for img in ds.items] == ["a", "b", "c"]
        assert all(img.pixels.min() >= -1 and img.pixels.max() <= 1 for img in ds.items)

    def test_empty_folder(self, tmp_path):
        assert len(load_folder(tmp_path, "images")) == 0

    def test_png_roundtrip_quantization(self, tmp_path):
        img = hc.gen_content_image(5, 32)
        save_image(img, tmp_path / "x.png")
        loaded = load_image(tmp_path / "x.png")
        assert np.abs(loaded.pixels - img.pixels).max() <= 1.0 / 127.5

    def test_mixed_frame_sizes_rejected(self, tmp_path):
        clip_dir = tmp_path / "clip"
        clip_dir.mkdir()
        save_image(hc.gen_content_image(0, 32), clip_dir / "frame_0000.png")
        save_image(hc.gen_content_image(0, 64), clip_dir / "frame_0001.png")
        with pytest.raises(FormatError):
            load_folder(tmp_path, "video")

    def test_video_with_flows_roundtrip(self, tmp_path):
        clip = hc.gen_video_clip(1, frames=4, size=32)
        clip_dir = tmp_path / "clip_0000"
        clip_dir.mkdir()
        for k in range(4):
            save_image(clip.frames[k], clip_dir / f"frame_{k:04d}.png")
        for k in range(3):
            write_flow(clip_dir / f"flow_{k:04d}.hcfl", clip.flows[k])
            write_occlusion(clip_dir / f"occ_{k:04d}.hcoc", clip.occlusion[k])
        ds = load_folder(tmp_path, "video")
        assert len(ds) == 1
        assert ds[0].has_flows
        assert np.array_equal(ds[0].flows, clip.flows)
        assert np.array_equal(ds[0].occlusion, clip.occlusion)

    def test_video_without_flows_marked_absent(self, tmp_path):
        clip_dir = tmp_path / "clip"
        clip_dir.mkdir()
        for k in range(3):
            save_image(hc.gen_content_image(k, 32), clip_dir / f"frame_{k:04d}.png")
        ds = load_folder(tmp_path, "video")
        assert not ds[0].has_flows

    def test_partial_flow_files_rejected(self, tmp_path):
        clip = hc.gen_video_clip(1, frames=4, size=32)
        clip_dir = tmp_path / "clip"
        clip_dir.mkdir()
        for k in range(4):
            save_image(clip.frames[k], clip_dir / f"frame_{k:04d}.png")
        write_flow(clip_dir / "flow_0000.hcfl", clip.flows[0])
        with pytest.raises(FormatError):
            load_folder(tmp_path, "video")

    def test_unknown_kind(self, tmp_path):
        with pytest.raises(ValueError):
            load_folder(tmp_path, "audio")

    def test_missing_folder(self, tmp_path):
        with pytest.raises(OSError):
            load_folder(tmp_path / "nope", "images")


def test_gradient_background_in_range():
    rng = np.random.default_rng(3)
    bg = _gradient_background(rng, 32)
    assert bg.shape == (3, 32, 32)
    assert np.abs(bg).max() <= 0.9 + 1e-6


def test_generators_thread_safe():
    # pure functions of their arguments: concurrent calls agree with serial ones
    from concurrent.futures import ThreadPoolExecutor

    serial = [hc.gen_content_image(i, 32).pixels for i in range(8)]
    with ThreadPoolExecutor(max_workers=4) as pool:
        parallel = list(pool.map(lambda i: hc.gen_content_image(i, 32).pixels, range(8)))
    for a, b in zip(serial, parallel):
        assert np.array_equal(a, b)
