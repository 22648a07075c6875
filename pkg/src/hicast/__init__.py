"""Desk-scale latent diffusion for customizable image and video style transfer."""

from .adapter import AdapterPyramid, StyleAdapter, adapter_forward, combine
from .backbone import (
    BackboneConfig,
    UNet,
    inflate_from_image_model,
    predict_noise,
    predict_noise_video,
)
from .codec import Autoencoder, CodecConfig, Latent, psnr, train_codec
from .conditioning import (
    ContentEncoder,
    ContentFeatures,
    FeatureNet,
    StyleEmbedder,
    StyleEmbedding,
    TimeEmbed,
    encode_content,
    style_stats,
    train_feature_net,
)
from .data import (
    ControlMap,
    Image,
    VideoClip,
    annotate,
    gen_content_image,
    gen_style_image,
    gen_video_clip,
    load_folder,
)
from .diffusion import (
    NoiseSchedule,
    SamplerConfig,
    StyleScalingFactors,
    cfg_combine,
    ddim_timesteps,
    make_schedule,
    sample,
)
from .errors import FormatError, StateError
from .losses import (
    Discriminator,
    LossWeights,
    PatchDiscriminator,
    PatchSet,
    content_loss,
    gan_losses,
    harmonious_loss,
    patch_contrastive,
    style_loss,
)
from .metrics import eval_report, gram_loss, perceptual_distance, temporal_loss

__version__ = "0.1.0"
