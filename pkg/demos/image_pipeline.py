"""Miniature end-to-end image stylization.

Trains every stage at toy budgets (a couple of minutes total), then samples
with different guidance weights and adapter strengths. For the properly
trained version of this pipeline, use the CLI with default budgets or run the
acceptance suite.
"""
import time
from pathlib import Path

import numpy as np

import hicast as hc
from hicast.adapter import StyleAdapter
from hicast.codec import train_codec
from hicast.conditioning import train_feature_net
from hicast.config import default_config
from hicast.data import ImageDataset, save_image
from hicast.diffusion import SamplerConfig, StyleScalingFactors
from hicast.pipeline import Models, stylize_image
from hicast.training import StageConfig, train_stage1, train_stage2

out_dir = Path(__file__).parent / "out"
out_dir.mkdir(exist_ok=True)

content = ImageDataset([hc.gen_content_image(i, 32) for i in range(64)])
styles = ImageDataset([hc.gen_style_image(i, 32) for i in range(64)])

models = Models.build(default_config())

t0 = time.time()
train_codec(models.codec, ImageDataset(content.items + styles.items), steps=400, seed=1)
models.feature_net = train_feature_net(
    [hc.gen_style_image(i, 32) for i in range(256)], steps=800, seed=2
)
print(f"stage 0 (codec + feature net): {time.time() - t0:.0f}s")

t0 = time.time()
train_stage1(models, content, styles, StageConfig(stage="image", steps=300, seed=5))
print(f"stage 1 (image fine-tune, toy budget): {time.time() - t0:.0f}s")

models.adapters["edge"] = StyleAdapter("edge", seed=4)
train_stage2(models, "edge", content, styles, StageConfig(stage="adapter", steps=100, seed=6))
print("stage 2 (edge adapter) done")

c = hc.gen_content_image(999, 32)
s = hc.gen_style_image(999, 32)
save_image(c, out_dir / "demo_content.png")
save_image(s, out_dir / "demo_style.png")

# guidance sweep: w_o scales the fully-conditioned branch; the remainder is
# split between the content-only and style-only branches
for w_o in (0.5, 1.0, 1.5):
    w = StyleScalingFactors(w_o, (1 - w_o) / 2, (1 - w_o) / 2)
    out = stylize_image(models, c, s, w, SamplerConfig(steps=20, seed=0))
    save_image(out, out_dir / f"demo_scaling_{w_o:g}.png")
    print(f"w_o={w_o:g}: output range [{out.min():.2f}, {out.max():.2f}]")

# adapter sweep: structural control strength
for weight in (0.0, 1.0):
    out = stylize_image(
        models, c, s, StyleScalingFactors(1, 0, 0), SamplerConfig(steps=20, seed=0),
        adapter_weights={"edge": weight},
    )
    save_image(out, out_dir / f"demo_adapter_{weight:g}.png")

base = np.asarray(hc.data.load_image(out_dir / "demo_adapter_0.png").pixels)
print(f"\nwrote demo images to {out_dir}")
