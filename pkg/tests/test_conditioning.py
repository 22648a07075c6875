import numpy as np
import pytest
import torch

import hicast as hc
from hicast.conditioning import (
    ContentEncoder,
    FeatureNet,
    StyleEmbedder,
    TimeEmbed,
    classify_accuracy,
    encode_content,
    style_stats,
    train_feature_net,
)


class TestFeatureNet:
    def test_needs_three_levels(self):
        with pytest.raises(ValueError):
            FeatureNet((8, 16))

    def test_level_shapes(self):
        net = FeatureNet((8, 16, 32), seed=0)
        feats = net.features(torch.zeros(1, 3, 32, 32))
        assert [tuple(f.shape[1:]) for f in feats] == [(8, 32, 32), (16, 16, 16), (32, 8, 8)]

    def test_random_init_accuracy_near_chance(self):
        net = FeatureNet(seed=11)  # steps=0 equivalent: untrained
        val = [hc.gen_style_image(5000 + i, 32) for i in range(400)]
        acc = classify_accuracy(net, val)
        assert 0.15 <= acc <= 0.35

    def test_trained_accuracy(self, quick_feature_net):
        val = [hc.gen_style_image(9000 + i, 32) for i in range(200)]
        assert classify_accuracy(quick_feature_net, val) >= 0.8

    def test_freeze_contract(self, quick_feature_net):
        assert quick_feature_net.frozen
        assert all(not p.requires_grad for p in quick_feature_net.parameters())

    def test_too_few_classes(self):
        imgs = [hc.gen_style_image(i, 32) for i in range(50)]
        one_family = [im for im in imgs if im.meta["family"] == imgs[0].meta["family"]]
        with pytest.raises(ValueError):
            train_feature_net(one_family, steps=1)


class TestStyleStats:
    def test_length_desk_scale(self, quick_feature_net):
        stats = style_stats(hc.gen_style_image(0, 32), quick_feature_net)
        assert stats.shape == (2 * (8 + 16 + 32),)  # 112

    def test_length_paper_scale_configuration(self):
        # five levels with the classic 64..512 channel pattern
        net = FeatureNet((64, 128, 256, 512, 512), seed=0)
        stats = style_stats(np.zeros((3, 32, 32), dtype=np.float32), net)
        assert stats.shape == (2944,)

    def test_constant_zero_image_variances_zero(self, quick_feature_net):
        stats = style_stats(np.zeros((3, 32, 32), dtype=np.float32), quick_feature_net)
        # layout is [mean_l, var_l] per level
        offset = 0
        for c in quick_feature_net.level_channels:
            var = stats[offset + c : offset + 2 * c]
            assert torch.allclose(var, torch.zeros(c), atol=1e-10)
            offset += 2 * c

    def test_spatial_permutation_invariance(self, quick_feature_net, rng):
        # mean/variance ignore where activations sit spatially
        img = torch.from_numpy(hc.gen_style_image(1, 32).pixels)
        feats = quick_feature_net.features(img[None])
        for level in feats:
            b, c, h, w = level.shape
            flat = level.flatten(2)
            perm = torch.from_numpy(rng.permutation(h * w))
            shuffled = flat[:, :, perm]
            assert torch.allclose(flat.mean(dim=2), shuffled.mean(dim=2), atol=1e-6)
            assert torch.allclose(
                flat.var(dim=2, unbiased=False), shuffled.var(dim=2, unbiased=False), atol=1e-6
            )

    def test_deterministic(self, quick_feature_net):
        img = hc.gen_style_image(2, 32)
        assert torch.equal(style_stats(img, quick_feature_net), style_stats(img, quick_feature_net))


class TestStyleEmbedder:
    def test_output_width(self):
        emb = StyleEmbedder(112, d_emb=64, seed=0)
        out = emb.embed(torch.randn(112))
        assert out.values.shape == (64,)
        assert not out.is_null

    def test_length_mismatch(self):
        emb = StyleEmbedder(112, seed=0)
        with pytest.raises(ValueError):
            emb.embed(torch.randn(64))

    def test_deterministic(self):
        emb = StyleEmbedder(112, seed=0)
        x = torch.randn(112)
        assert torch.equal(emb.embed(x).values, emb.embed(x).values)

    def test_null_token_shared_parameter(self):
        emb = StyleEmbedder(112, seed=0)
        a, b = emb.null(), emb.null()
        assert a.is_null and b.is_null
        assert a.values is b.values
        assert a.values is emb.null_token


class TestContentEncoder:
    def test_channel_pattern(self, quick_codec):
        enc = ContentEncoder(seed=0)
        te = TimeEmbed(64)
        lat = quick_codec.encode(hc.gen_content_image(0, 32))
        feats = encode_content(hc.gen_content_image(0, 32), 5, quick_codec, enc, te)
        assert lat.values.shape == (4, 8, 8)
        assert feats.values.shape == (3, 8, 8)
        assert feats.timestep == 5 and not feats.is_null

    def test_timestep_changes_features(self, quick_codec):
        enc = ContentEncoder(seed=0)
        te = TimeEmbed(64)
        img = hc.gen_content_image(1, 32)
        f0 = encode_content(img, 0, quick_codec, enc, te).values
        f500 = encode_content(img, 500, quick_codec, enc, te).values
        assert (f0 - f500).norm() > 0

    def test_timestep_range(self, quick_codec):
        enc = ContentEncoder(seed=0)
        te = TimeEmbed(64)
        with pytest.raises(ValueError):
            encode_content(hc.gen_content_image(0, 32), 1000, quick_codec, enc, te)
        with pytest.raises(ValueError):
            encode_content(hc.gen_content_image(0, 32), -1, quick_codec, enc, te)

    def test_null_features(self):
        enc = ContentEncoder(seed=0)
        nf = enc.null_features(3, (8, 8))
        assert nf.is_null and nf.timestep == 3
        assert nf.values.shape == (3, 8, 8)
        # spatially constant, equal to the learned token
        assert torch.equal(nf.values[:, 0, 0], enc.null_token)
        assert (nf.values.std(dim=(1, 2)) == 0).all()

    def test_null_token_is_parameter(self):
        enc = ContentEncoder(seed=0)
        assert isinstance(enc.null_token, torch.nn.Parameter)
        assert enc.null_token.requires_grad


def test_time_embed_deterministic_and_shaped():
    te = TimeEmbed(64)
    out = te(torch.tensor([0, 500, 999]))
    assert out.shape == (3, 64)
    assert torch.equal(out, te(torch.tensor([0, 500, 999])))
    assert (out[0] != out[1]).any()
