"""Command-line entry point: gendata, train, sample, eval, ablate.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import torch

from .ablation import render_config_of, run_ablation, evaluate_model
from .diffusion import CFGConfig, sample
from .experiments import ABLATION_VARIANTS
from .toyworld import SceneConfig, generate_dataset, read_dataset, write_dataset, write_ppm
from .trainloop import TrainConfig, assemble_batch, dataset_features, load_checkpoint, train

log = logging.getLogger("toydrive")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _map_null(value: str) -> str:
    return {"zero": "zero_map", "shared": "shared_map"}[value]


def _load_json(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None


def _train_config(path: str | None, **overrides) -> TrainConfig:
    try:
        d = _load_json(path)
        d.update({k: v for k, v in overrides.items() if v is not None})
        return TrainConfig.from_json(d)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad train config: {exc}") from None


def split_dataset(ds, split: str):
    """'all', or a deterministic 90/10 split by position ('train' / 'val')."""
    n = len(ds)
    n_val = max(1, n // 10) if n > 1 else 0
    if split == "all":
        return ds
    if split == "val":
        return ds.subset(range(n - n_val, n)) if n_val else ds
    if split == "train":
        return ds.subset(range(0, n - n_val))
    raise UsageError(f"unknown split {split!r}")


def cmd_gendata(args) -> None:
    try:
        scene_cfg = SceneConfig(**_load_json(args.config))
    except TypeError as exc:
        raise UsageError(f"bad scene config: {exc}") from None
    ds = generate_dataset(args.num_scenes, args.seed, scene_cfg)
    write_dataset(ds, args.out)
    print(f"wrote {len(ds)} scenes to {args.out}")


def cmd_train(args) -> None:
    cfg = _train_config(args.config, dataset=args.data)
    result = train(cfg, args.out, resume_from=args.resume)
    print(f"finished at loss {result.losses[-1]:.5f}; checkpoint {result.checkpoint}" if result.losses
          else "nothing to do")


def cmd_sample(args) -> None:
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.model.eval()
    ds = read_dataset(args.data)
    try:
        idx = ds.index(args.scene_id)
    except KeyError:
        raise UsageError(f"scene {args.scene_id!r} not in {args.data}") from None
    tc = ckpt.train_config
    footprints = tc.object_footprints_in_map if tc else False
    feats = dataset_features(ds.subset([idx]), model.cfg, model.vocab, footprints=footprints)
    _, cond = assemble_batch(feats, model.cfg, mode="eval")
    schedule = (tc or TrainConfig()).schedule.build()
    imgs = sample(model, cond, schedule, steps=args.steps, cfg=CFGConfig(args.cfg_scale, _map_null(args.map_null)),
                  seed=args.seed, shared_noise=args.shared_noise)[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for v, img in enumerate(imgs):
        write_ppm(out / f"{args.scene_id}_{v}.ppm", img)
    print(f"wrote {len(imgs)} views to {out}")


def cmd_eval(args) -> None:
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.model.eval()
    ds = split_dataset(read_dataset(args.data), args.split)
    if args.limit:
        ds = ds.subset(range(min(args.limit, len(ds))))
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    bad = set(metrics) - {"controllability", "consistency", "reconstruction"}
    if bad:
        raise UsageError(f"unknown metrics: {', '.join(sorted(bad))}")
    tc = ckpt.train_config
    schedule = (tc or TrainConfig()).schedule.build()
    with torch.no_grad():
        report = evaluate_model(model, ds, schedule, render_config_of(ds), steps=args.steps,
                                cfg=CFGConfig(args.cfg_scale, _map_null(args.map_null)), seed=args.seed,
                                metrics=metrics, footprints=tc.object_footprints_in_map if tc else False,
                                echo={"checkpoint": str(args.ckpt), "split": args.split})
    Path(args.out).write_text(json.dumps(report.to_json(), indent=2))
    print(json.dumps({k: v for k, v in report.to_json().items() if k != "config"}, indent=2))


def cmd_ablate(args) -> None:
    variant = args.variant.replace("-", "_")
    variant = {"views_1": "views_one", "views_2": "views_two", "cfg_sweep": "cfg_scale_sweep"}.get(variant, variant)
    if variant not in ABLATION_VARIANTS:
        raise UsageError(f"unknown variant {args.variant!r}")
    base = _train_config(args.config, dataset=args.data)
    if not base.dataset:
        raise UsageError("no training dataset: set 'dataset' in the config or pass --data")
    train_ds = read_dataset(base.dataset)
    eval_ds = read_dataset(args.eval_data) if args.eval_data else split_dataset(train_ds, "val")
    if args.limit:
        eval_ds = eval_ds.subset(range(min(args.limit, len(eval_ds))))
    reports = run_ablation(variant, base, args.out, eval_ds, train_ds, sample_steps=args.steps,
                           cfg_scale=args.cfg_scale, map_null_mode=_map_null(args.map_null), eval_seed=args.seed)
    for r in reports:
        print(json.dumps({k: v for k, v in r.to_json().items() if k != "config"}))


def build_parser() -> Parser:
    p = Parser(prog="toydrive", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    g = sub.add_parser("gendata", help="sample and render a procedural dataset")
    g.add_argument("--config", help="JSON with SceneConfig fields (optional)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--num-scenes", type=int, required=True)
    g.set_defaults(fn=cmd_gendata)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", required=True, help="JSON with TrainConfig fields")
    t.add_argument("--data", help="dataset directory (overrides the config)")
    t.add_argument("--out", required=True, help="checkpoint / metrics directory")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sample", help="generate all views of one scene")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--scene-id", required=True)
    s.add_argument("--steps", type=int, default=50)
    s.add_argument("--cfg-scale", type=float, default=2.0)
    s.add_argument("--map-null", choices=("zero", "shared"), default="zero")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--shared-noise", action="store_true", help="same initial noise for every view")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_sample)

    e = sub.add_parser("eval", help="sample a split and score it against the oracle renders")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val", choices=("all", "train", "val"))
    e.add_argument("--metrics", default="controllability,consistency,reconstruction")
    e.add_argument("--steps", type=int, default=20)
    e.add_argument("--cfg-scale", type=float, default=2.0)
    e.add_argument("--map-null", choices=("zero", "shared"), default="zero")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--limit", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate one ablation variant")
    a.add_argument("--variant", required=True,
                   choices=("full", "no-box-encoder", "no-fviz", "views-1", "views-2", "views-all", "cfg-sweep"))
    a.add_argument("--config", required=True)
    a.add_argument("--data", help="training dataset directory (overrides the config)")
    a.add_argument("--eval-data", help="held-out dataset (default: val split of the training data)")
    a.add_argument("--steps", type=int, default=20)
    a.add_argument("--cfg-scale", type=float, default=2.0)
    a.add_argument("--map-null", choices=("zero", "shared"), default="zero")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--limit", type=int, default=0)
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"toydrive: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    try:
        args.fn(args)
    except UsageError as exc:
        print(f"toydrive: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        print(f"toydrive: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
