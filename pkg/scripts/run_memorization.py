"""Single-scene overfit: train on one scene, then sample it back and report per-view PSNR.

    python scripts/run_memorization.py --out runs/memorize --steps 5000
"""

import argparse
import json
import logging
import time
from pathlib import Path

import torch

from toydrive.ablation import file_sha256
from toydrive.diffusion import CFGConfig, sample
from toydrive.experiments import desk_unet, memorization_config
from toydrive.metrics import reconstruction_metrics
from toydrive.toyworld import generate_dataset, write_dataset
from toydrive.trainloop import assemble_batch, dataset_features, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/memorize")
    ap.add_argument("--steps", type=int, default=5000)
    ap.add_argument("--scene-seed", type=int, default=7)
    ap.add_argument("--lr", type=float, default=5e-4)
    ap.add_argument("--batch-size", type=int, default=1)
    ap.add_argument("--sample-steps", type=int, default=50)
    ap.add_argument("--cfg-scale", type=float, default=1.0)
    ap.add_argument("--sample-seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(1)

    out = Path(args.out)
    data_dir = out / "data"
    ds = generate_dataset(1, args.scene_seed)
    write_dataset(ds, data_dir)
    cfg = memorization_config(str(data_dir), steps=args.steps, lr=args.lr, batch_size=args.batch_size)
    t0 = time.time()
    result = train(cfg, out / "ckpt", dataset=ds)
    train_s = time.time() - t0

    feats = dataset_features(ds, cfg.unet, result.model.vocab)
    _, cond = assemble_batch(feats, cfg.unet, mode="eval")
    imgs = sample(result.model, cond, cfg.schedule.build(), steps=args.sample_steps,
                  cfg=CFGConfig(args.cfg_scale), seed=args.sample_seed)[0]
    psnr = [reconstruction_metrics(g, o)["psnr"] for g, o in zip(imgs, ds.images[0])]
    report = {
        "steps": args.steps, "train_seconds": train_s, "final_loss": result.losses[-1],
        "first_loss": result.losses[0], "psnr_per_view": psnr, "cfg_scale": args.cfg_scale,
        "sample_steps": args.sample_steps, "sample_seed": args.sample_seed, "lr": args.lr, "batch_size": args.batch_size,
        "checkpoint": str(result.checkpoint), "checkpoint_sha256": file_sha256(result.checkpoint),
    }
    (out / "report.json").write_text(json.dumps(report, indent=2))
    print(json.dumps(report, indent=2))


if __name__ == "__main__":
    main()
