"""Run configuration: one JSON document with per-module sections.

Flags override file values, file values override defaults. The resolved
document is echoed into every checkpoint manifest and run sidecar.
"""
from __future__ import annotations

import json
from copy import deepcopy
from pathlib import Path


def default_config() -> dict:
    return {
        "data": {
            "dir": None,
            "size": 32,
            "images": 256,
            "styles": 128,
            "videos": 16,
            "frames": 8,
            "seed": 0,
        },
        "codec": {
            "downsample_factor": 4,
            "latent_channels": 4,
            "base_channels": 32,
            "steps": 2500,
            "lr": 3e-3,
            "batch_size": 16,
            "seed": 1,
        },
        "feature_net": {
            "level_channels": [8, 16, 32],
            "train_styles": 512,
            "steps": 1500,
            "lr": 2e-3,
            "seed": 2,
        },
        "backbone": {
            "level_channels": [32, 64],
            "attention_levels": [1],
            "d_emb": 64,
            "c_content": 3,
            "seed": 3,
        },
        "adapters": {"kinds": ["edge", "depth", "segmentation"], "seed": 4},
        "diffusion": {
            "num_timesteps": 1000,
            "beta_start": 1e-4,
            "beta_end": 0.02,
            "steps": 20,
        },
        "losses": {
            "lambda_c": 2.0,
            "lambda_s": 4.0,
            "lambda_g": 1.0,
            "lambda_pg": 2.0,
            "lambda_hg1": 0.01,
            "lambda_hg2": 2.0,
            "lambda_hl": 1.0,
            "tau": 0.07,
            "squared": False,
        },
        "stage": {
            "steps": 2000,
            "adapter_steps": 400,
            "temporal_steps": 200,
            "batch_size": 8,
            "lr": 1e-4,
            "seed": 5,
            "supervision_probs": [0.7, 0.1, 0.1, 0.1],
            "checkpoint_every": 500,
            "log_every": 10,
            "clip_frames": 4,
        },
    }


def _merge(base: dict, overlay: dict) -> dict:
    out = deepcopy(base)
    for key, value in overlay.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = deepcopy(value)
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> dict:
    config = default_config()
    if path is not None:
        with open(path) as f:
            config = _merge(config, json.load(f))
    if overrides:
        config = _merge(config, overrides)
    return config
