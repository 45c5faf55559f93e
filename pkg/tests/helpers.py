"""Small builders shared across test modules."""

import torch

from toydrive.backbone import Conditions, MultiViewDiffusionModel
from toydrive.experiments import tiny_unet


def random_conditions(cfg, batch, gen, n_real=None, dtype=torch.float32) -> Conditions:
    v, m = cfg.num_views, cfg.max_boxes
    fb, fc = 8 * 6 * cfg.num_bands, 7 * 6 * cfg.num_bands
    L = 11
    if n_real is None:
        n_real = torch.randint(0, m + 1, (batch, v), generator=gen)
    else:
        n_real = torch.full((batch, v), n_real)
    mask = torch.arange(m)[None, None, :] < n_real[..., None]
    return Conditions(
        text_ids=torch.randint(0, 20, (batch, L), generator=gen),
        text_mask=torch.ones(batch, L, dtype=torch.bool),
        cam_feats=torch.rand(batch, v, fc, generator=gen, dtype=dtype) * 2 - 1,
        box_classes=torch.randint(0, 4, (batch, v, m), generator=gen),
        box_feats=torch.rand(batch, v, m, fb, generator=gen, dtype=dtype) * 2 - 1,
        box_mask=mask,
        bev=(torch.rand(batch, cfg.map_channels, *cfg.map_grid, generator=gen) < 0.3).to(dtype),
        scene_null=torch.zeros(batch, dtype=torch.bool),
        box_null=torch.zeros(batch, dtype=torch.bool),
    )


def tiny_model(seed=0, **overrides) -> MultiViewDiffusionModel:
    torch.manual_seed(seed)
    return MultiViewDiffusionModel(tiny_unet(**overrides))


def randomize_zero_init(model, seed=0, std=0.05):
    """Give every all-zero parameter small random values so all paths carry signal."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            if p.numel() and not p.any():
                p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * std)
    return model
