import numpy as np
import pytest
import torch

import hicast as hc
from hicast.codec import train_codec
from hicast.conditioning import train_feature_net
from hicast.config import default_config
from hicast.data import ImageDataset, VideoDataset
from hicast.pipeline import Models


@pytest.fixture(scope="session")
def content_images():
    return [hc.gen_content_image(i, 32) for i in range(64)]


@pytest.fixture(scope="session")
def style_images():
    return [hc.gen_style_image(i, 32) for i in range(64)]


@pytest.fixture(scope="session")
def video_clips():
    return [hc.gen_video_clip(i, frames=8, size=32) for i in range(4)]


@pytest.fixture(scope="session")
def quick_codec(content_images, style_images):
    """Small-budget codec: trained enough for meaningful latents, not for the
    acceptance PSNR bar (the acceptance suite trains its own)."""
    codec = hc.Autoencoder(seed=1)
    train_codec(codec, ImageDataset(content_images + style_images), steps=250, seed=1)
    return codec


@pytest.fixture(scope="session")
def quick_feature_net(style_images):
    extra = [hc.gen_style_image(1000 + i, 32) for i in range(192)]
    return train_feature_net(style_images + extra, steps=1000, seed=2)


@pytest.fixture(scope="session")
def quick_models(quick_codec, quick_feature_net):
    models = Models.build(default_config())
    models.codec = quick_codec
    models.feature_net = quick_feature_net
    models.style_embedder = hc.StyleEmbedder(quick_feature_net.stats_dim, seed=7)
    return models


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(0)
