"""Desk-scale presets shared by the scripts, the CLI and the acceptance suite.

The library defaults follow the full toy architecture (base 64, attention at the two
coarsest levels). These presets shrink width and attention placement so that a run fits
on a single CPU core.
"""

from __future__ import annotations

import dataclasses

from .backbone import UNetConfig
from .trainloop import TrainConfig


def desk_unet(**overrides) -> UNetConfig:
    base = dict(base_channels=32, channel_mult=(1, 2, 2), attn_levels=(2,), num_heads=4, d_emb=64)
    base.update(overrides)
    return UNetConfig(**base)


def tiny_unet(**overrides) -> UNetConfig:
    """Smallest config that still exercises every block type (used by gradient checks)."""
    base = dict(base_channels=8, channel_mult=(1, 2), attn_levels=(1,), num_heads=2, d_emb=16,
                image_h=8, image_w=16, max_boxes=4, num_bands=2, map_grid=(8, 8))
    base.update(overrides)
    return UNetConfig(**base)


def memorization_config(dataset: str, steps: int = 5000, lr: float = 5e-4, seed: int = 0,
                        batch_size: int = 1) -> TrainConfig:
    """Single-scene overfit; a batch repeats the scene with independent timesteps and noise."""
    return TrainConfig(
        dataset=dataset, unet=desk_unet(), lr=lr, warmup_steps=100, batch_size=batch_size, total_steps=steps,
        checkpoint_every=max(steps, 1), log_every=50, seed=seed,
    )


def controllability_config(dataset: str, steps: int = 6000, lr: float = 5e-4, seed: int = 0,
                           batch_size: int = 4) -> TrainConfig:
    return TrainConfig(
        dataset=dataset, unet=desk_unet(), lr=lr, warmup_steps=300, batch_size=batch_size, total_steps=steps,
        checkpoint_every=1000, log_every=50, seed=seed,
    )


ABLATION_VARIANTS = ("full", "no_box_encoder", "no_fviz", "views_one", "views_two", "views_all", "cfg_scale_sweep")


def variant_config(variant: str, base: TrainConfig) -> TrainConfig:
    """Apply one ablation axis to ``base``; everything else (data, seed, steps) is untouched."""
    if variant not in ABLATION_VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {ABLATION_VARIANTS}")
    unet = base.unet
    cfg = base
    if variant == "no_box_encoder":
        unet = dataclasses.replace(unet, use_box_encoder=False, map_channels=7)
        cfg = dataclasses.replace(base, object_footprints_in_map=True)
    elif variant == "no_fviz":
        unet = dataclasses.replace(unet, use_fviz=False)
    elif variant == "views_one":
        unet = dataclasses.replace(unet, attended_views="one")
    elif variant in ("views_two", "full", "cfg_scale_sweep"):
        unet = dataclasses.replace(unet, attended_views="two")
    elif variant == "views_all":
        unet = dataclasses.replace(unet, attended_views="all")
    return dataclasses.replace(cfg, unet=unet)
