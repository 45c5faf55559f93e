"""Checkpoint evaluation and the ablation harness."""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .backbone import MultiViewDiffusionModel
from .diffusion import CFGConfig, NoiseSchedule, sample
from .experiments import variant_config
from .metrics import MetricsReport, evaluate
from .toyworld import Dataset, RenderConfig
from .trainloop import TrainConfig, assemble_batch, dataset_features, load_checkpoint, model_config_for, train

log = logging.getLogger(__name__)

CFG_SWEEP_SCALES = (1.5, 2.0, 2.5, 3.0, 4.0)
MAP_NULL_MODES = ("zero_map", "shared_map")


def generate_for_dataset(model: MultiViewDiffusionModel, dataset: Dataset, schedule: NoiseSchedule,
                         steps: int = 20, cfg: CFGConfig = CFGConfig(), seed: int = 0, batch: int = 4,
                         footprints: bool = False) -> list[list[np.ndarray]]:
    """Sample every scene of ``dataset``; chunk k uses seed ``seed * 100003 + k`` so results do not
    depend on anything but (model, dataset, settings)."""
    feats = dataset_features(dataset, model.cfg, model.vocab, footprints=footprints)
    out = []
    model.eval()
    for k, start in enumerate(range(0, len(feats), batch)):
        _, cond = assemble_batch(feats[start:start + batch], model.cfg, mode="eval")
        imgs = sample(model, cond, schedule, steps=steps, cfg=cfg, seed=seed * 100003 + k)
        out.extend([list(views) for views in imgs])
    return out


def evaluate_model(model, dataset: Dataset, schedule: NoiseSchedule, rc: RenderConfig | None = None,
                   steps: int = 20, cfg: CFGConfig = CFGConfig(), seed: int = 0, batch: int = 4,
                   metrics: Sequence[str] = ("controllability", "consistency", "reconstruction"),
                   footprints: bool = False, echo: dict | None = None) -> MetricsReport:
    rc = rc or render_config_of(dataset)
    generated = generate_for_dataset(model, dataset, schedule, steps, cfg, seed, batch, footprints)
    return evaluate(generated, dataset.scenes, rc, dataset.images, metrics,
                    sampling_echo(model, steps, cfg, seed, batch, echo))


def sampling_echo(model, steps: int, cfg: CFGConfig, seed: int, batch: int, extra: dict | None = None) -> dict:
    return {"steps": steps, "cfg_scale": cfg.scale, "map_null_mode": cfg.map_null_mode, "seed": seed,
            "batch": batch, "model": model.cfg.to_json(), **(extra or {})}


def file_sha256(path: Path | str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def render_config_of(dataset: Dataset) -> RenderConfig:
    rc = dataset.config.get("render")
    return RenderConfig.from_json(rc) if rc else RenderConfig()


def run_ablation(variant: str, base: TrainConfig, out_dir: Path | str, eval_dataset: Dataset,
                 train_dataset: Dataset | None = None, sample_steps: int = 20, cfg_scale: float = 2.0,
                 map_null_mode: str = "zero_map", eval_seed: int = 0, batch: int = 4,
                 save_images: bool = False) -> list[MetricsReport]:
    """Train (or reuse a finished run of) one variant and evaluate it on ``eval_dataset``.

    Reports are written to ``out_dir/<variant>/report*.json`` as they complete. With ``save_images``
    the generated views are kept next to each report (``samples*.npz``) so the numbers can be audited
    without re-sampling.
    """
    cfg = variant_config(variant, base)
    run_dir = Path(out_dir) / variant
    final = run_dir / "final.ckpt"
    if final.is_file():
        model = load_checkpoint(final).model
        log.info("reusing finished run %s", final)
    else:
        model = train(cfg, run_dir, dataset=train_dataset).model
    model.eval()
    schedule = cfg.schedule.build()
    echo = {"variant": variant, "train_config": cfg.to_json(), "checkpoint_sha256": file_sha256(final)}
    if variant == "cfg_scale_sweep":
        settings = [(s, m) for m in MAP_NULL_MODES for s in CFG_SWEEP_SCALES]
    else:
        settings = [(cfg_scale, map_null_mode)]
    reports = []
    for scale, mode in settings:
        guidance = CFGConfig(scale, mode)
        with torch.no_grad():
            generated = generate_for_dataset(model, eval_dataset, schedule, sample_steps, guidance, eval_seed, batch,
                                             cfg.object_footprints_in_map)
        rep = evaluate(generated, eval_dataset.scenes, render_config_of(eval_dataset), eval_dataset.images,
                       config=sampling_echo(model, sample_steps, guidance, eval_seed, batch, echo))
        reports.append(rep)
        suffix = "" if len(settings) == 1 else f"_{mode}_{scale:g}"
        (run_dir / f"report{suffix}.json").write_text(json.dumps(rep.to_json(), indent=2))
        if save_images:
            np.savez_compressed(run_dir / f"samples{suffix}.npz", images=np.asarray(generated, dtype=np.uint8))
    return reports


def config_echo_difference(a: dict, b: dict, prefix: str = "") -> set[str]:
    """Dotted keys whose values differ between two nested config dicts."""
    diff = set()
    for k in set(a) | set(b):
        key = f"{prefix}{k}"
        va, vb = a.get(k), b.get(k)
        if isinstance(va, dict) and isinstance(vb, dict):
            diff |= config_echo_difference(va, vb, key + ".")
        elif va != vb:
            diff.add(key)
    return diff
