"""Training orchestration: batch assembly, optimisation, checkpoints and run configs."""

from __future__ import annotations

import dataclasses
import json
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .backbone import Conditions, MultiViewDiffusionModel, UNetConfig
from .diffusion import NoiseSchedule, make_schedule, training_loss
from .encoders import CapacityError, TextVocabulary, box_features, pose_features, select_boxes_for_view
from .geometry import BEVMapSpec, RoadElement, box_corners, rasterize_map
from .toyworld import OBJECT_CLASSES, ROAD_CLASSES, Dataset, SceneRecord, build_prompt, read_dataset

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"TOYDRIVE"
CHECKPOINT_VERSION = 1


class RecordError(ValueError):
    """A dataset record cannot be turned into a training example."""

    def __init__(self, scene_id: str, message: str):
        super().__init__(f"scene {scene_id}: {message}")
        self.scene_id = scene_id


class CheckpointError(IOError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class ScheduleParams:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    kind: str = "linear"

    def build(self) -> NoiseSchedule:
        return make_schedule(self.T, self.beta_start, self.beta_end, self.kind)


@dataclass
class TrainConfig:
    dataset: str = ""
    unet: UNetConfig = field(default_factory=UNetConfig)
    schedule: ScheduleParams = field(default_factory=ScheduleParams)
    gamma_s: float = 0.2
    augment_rate: float = 0.10
    lr: float = 8e-5
    weight_decay: float = 1e-2
    warmup_steps: int = 300
    batch_size: int = 8
    total_steps: int = 1000
    checkpoint_every: int = 500
    log_every: int = 10
    grad_clip: float = 1.0
    seed: int = 0
    object_footprints_in_map: bool = False

    def __post_init__(self):
        if isinstance(self.unet, dict):
            self.unet = _strict(UNetConfig, self.unet, "unet")
        if isinstance(self.schedule, dict):
            self.schedule = _strict(ScheduleParams, self.schedule, "schedule")
        for name in ("gamma_s", "augment_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.batch_size <= 0 or self.total_steps < 0 or self.checkpoint_every <= 0 or self.log_every <= 0:
            raise ValueError("batch size, checkpoint cadence and log cadence must be positive")
        if self.warmup_steps < 0 or self.lr <= 0:
            raise ValueError("warmup must be >= 0 and lr > 0")

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["unet"] = self.unet.to_json()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        return _strict(cls, d, "config")

    @classmethod
    def load(cls, path: Path | str) -> "TrainConfig":
        return cls.from_json(json.loads(Path(path).read_text()))


def _strict(cls, d: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ValueError(f"unknown keys in {where}: {', '.join(unknown)}")
    return cls(**d)


# ---------------------------------------------------------------------------
# condition assembly


@dataclass
class SceneFeatures:
    """Everything about one scene that does not depend on the model weights."""

    scene_id: str
    text_ids: np.ndarray  # (L,)
    cam_feats: np.ndarray  # (V, Fc)
    box_classes: np.ndarray  # (N,)
    box_feats: np.ndarray  # (N, Fb)
    visible: np.ndarray  # (V, N) bool
    bev: np.ndarray  # (C, gw, gh) uint8
    images: np.ndarray | None  # (V, 3, H, W) float32 in [-1, 1]


def object_footprint_elements(scene: SceneRecord, first_channel: int) -> list[RoadElement]:
    """Box footprints as ground polygons in channel ``first_channel + class``."""
    elems = []
    for b in scene.boxes:
        bottom = box_corners(b)[[0, 1, 3, 2], :2]  # z-bit clear, CCW order
        elems.append(RoadElement(first_channel + b.class_id, bottom))
    return elems


def scene_features(scene: SceneRecord, images: Sequence[np.ndarray] | None, cfg: UNetConfig,
                   vocab: TextVocabulary, map_extent: float = 48.0, footprints: bool = False) -> SceneFeatures:
    v = scene.rig.num_views
    if v != cfg.num_views:
        raise RecordError(scene.scene_id, f"rig has {v} views, model expects {cfg.num_views}")
    if images is not None:
        if len(images) != v:
            raise RecordError(scene.scene_id, f"{len(images)} images for {v} views")
        for img in images:
            if img.shape != (cfg.image_h, cfg.image_w, 3):
                raise RecordError(scene.scene_id, f"image shape {img.shape} != {(cfg.image_h, cfg.image_w, 3)}")
    try:
        text_ids = np.array(vocab.encode(build_prompt(scene)), dtype=np.int64)
    except KeyError as exc:
        raise RecordError(scene.scene_id, str(exc)) from None
    n_map = len(ROAD_CLASSES) + (len(OBJECT_CLASSES) if footprints else 0)
    if n_map != cfg.map_channels:
        raise RecordError(scene.scene_id, f"map has {n_map} channels, model expects {cfg.map_channels}")
    spec = BEVMapSpec(map_extent, map_extent, cfg.map_grid[0], cfg.map_grid[1], n_map)
    elements = list(scene.road_elements)
    if footprints:
        elements += object_footprint_elements(scene, len(ROAD_CLASSES))
    bev = rasterize_map(elements, spec).data.transpose(2, 0, 1).copy()
    fb = 8 * 6 * cfg.num_bands
    boxes = scene.boxes
    return SceneFeatures(
        scene_id=scene.scene_id,
        text_ids=text_ids,
        cam_feats=np.stack([pose_features(p, cfg.num_bands) for p in scene.rig.poses]),
        box_classes=np.array([b.class_id for b in boxes], dtype=np.int64),
        box_feats=(np.stack([box_features(b, cfg.num_bands, cfg.coord_scale) for b in boxes])
                   if boxes else np.zeros((0, fb))),
        visible=(np.array([[select_boxes_for_view([b], p) == [0] for b in boxes] for p in scene.rig.poses],
                          dtype=bool).reshape(v, len(boxes)) if cfg.use_fviz else np.ones((v, len(boxes)), bool)),
        bev=bev,
        images=None if images is None else
        (np.stack(images).astype(np.float32).transpose(0, 3, 1, 2) / 127.5 - 1.0),
    )


def assemble_batch(features: Sequence[SceneFeatures], cfg: UNetConfig, rng: np.random.Generator | None = None,
                   mode: str = "train", augment_rate: float = 0.10) -> tuple[torch.Tensor | None, Conditions]:
    """Stack scenes into (B, V, 3, H, W) images and batched Conditions.

    ``mode="eval"`` forces the invisible-box augmentation off.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    rate = augment_rate if mode == "train" else 0.0
    if rate > 0 and rng is None:
        raise ValueError("train-mode assembly with augmentation needs an rng")
    b, v, m = len(features), cfg.num_views, cfg.max_boxes
    fb = 8 * 6 * cfg.num_bands
    L = max(len(f.text_ids) for f in features)
    text_ids = np.zeros((b, L), dtype=np.int64)
    text_mask = np.zeros((b, L), dtype=bool)
    box_classes = np.zeros((b, v, m), dtype=np.int64)
    box_feats = np.zeros((b, v, m, fb), dtype=np.float32)
    box_mask = np.zeros((b, v, m), dtype=bool)
    for i, f in enumerate(features):
        text_ids[i, : len(f.text_ids)] = f.text_ids
        text_mask[i, : len(f.text_ids)] = True
        if not cfg.use_box_encoder:
            continue
        for view in range(v):
            chosen = []
            for j in range(len(f.box_classes)):
                if f.visible[view, j] or (rate > 0 and rng.random() < rate):
                    chosen.append(j)
            if len(chosen) > m:
                raise RecordError(f.scene_id, str(CapacityError(f"{len(chosen)} boxes for view {view} exceed "
                                                                f"max_boxes={m}")))
            box_classes[i, view, : len(chosen)] = f.box_classes[chosen]
            box_feats[i, view, : len(chosen)] = f.box_feats[chosen]
            box_mask[i, view, : len(chosen)] = True
    cond = Conditions(
        text_ids=torch.from_numpy(text_ids),
        text_mask=torch.from_numpy(text_mask),
        cam_feats=torch.from_numpy(np.stack([f.cam_feats for f in features]).astype(np.float32)),
        box_classes=torch.from_numpy(box_classes),
        box_feats=torch.from_numpy(box_feats),
        box_mask=torch.from_numpy(box_mask),
        bev=torch.from_numpy(np.stack([f.bev for f in features]).astype(np.float32)),
        scene_null=torch.zeros(b, dtype=torch.bool),
        box_null=torch.zeros(b, dtype=torch.bool),
    )
    images = None
    if all(f.images is not None for f in features):
        images = torch.from_numpy(np.stack([f.images for f in features]))
    return images, cond


def dataset_features(dataset: Dataset, cfg: UNetConfig, vocab: TextVocabulary,
                     footprints: bool = False) -> list[SceneFeatures]:
    extent = dataset.config.get("scene", {}).get("map_extent", 48.0)
    return [scene_features(s, imgs, cfg, vocab, extent, footprints) for s, imgs in zip(dataset.scenes, dataset.images)]


# ---------------------------------------------------------------------------
# checkpoints


def _rng_state(np_rng: np.random.Generator | None, gen: torch.Generator | None) -> dict:
    return {
        "numpy": None if np_rng is None else np_rng.bit_generator.state,
        "torch": None if gen is None else gen.get_state().tolist(),
    }


def save_checkpoint(path: Path | str, model: MultiViewDiffusionModel, *, optimizer=None, step: int = 0,
                    train_config: TrainConfig | None = None, np_rng=None, torch_gen=None, extra: dict | None = None) -> None:
    """Single-file checkpoint: magic, version, JSON header length, JSON header, raw LE float32 blobs."""
    tensors: dict[str, torch.Tensor] = {f"model/{k}": v for k, v in model.state_dict().items()}
    opt_meta = None
    if optimizer is not None:
        sd = optimizer.state_dict()
        index = {id(p): i for i, p in enumerate(p for g in optimizer.param_groups for p in g["params"])}
        names = {index[id(p)]: n for n, p in model.named_parameters() if id(p) in index}
        opt_meta = {"param_groups": sd["param_groups"], "state": {}}
        for pid, st in sd["state"].items():
            entry = {}
            for k, val in st.items():
                if torch.is_tensor(val) and val.dim() > 0:
                    tensors[f"optim/{names[pid]}/{k}"] = val
                    entry[k] = "tensor"
                else:
                    entry[k] = float(val)
            opt_meta["state"][names[pid]] = entry
    header = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.cfg.to_json(),
        "train_config": None if train_config is None else train_config.to_json(),
        "vocabulary": model.vocab.words,
        "step": step,
        "rng": _rng_state(np_rng, torch_gen),
        "optimizer": opt_meta,
        "extra": extra or {},
        "tensors": [],
    }
    blobs = []
    offset = 0
    for name, t in tensors.items():
        arr = t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4")
        raw = arr.tobytes()
        header["tensors"].append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    hdr = json.dumps(header).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(hdr)))
        f.write(hdr)
        for raw in blobs:
            f.write(raw)
    tmp.replace(path)


@dataclass
class Checkpoint:
    model: MultiViewDiffusionModel
    step: int
    header: dict
    tensors: dict

    @property
    def train_config(self) -> TrainConfig | None:
        tc = self.header.get("train_config")
        return None if tc is None else TrainConfig.from_json(tc)

    def restore_optimizer(self, optimizer) -> None:
        meta = self.header.get("optimizer")
        if meta is None:
            raise CheckpointError("checkpoint has no optimizer state")
        index = {id(p): i for i, p in enumerate(p for g in optimizer.param_groups for p in g["params"])}
        state = {}
        for name, p in self.model.named_parameters():
            if name not in meta["state"]:
                continue
            entry = {}
            for k, kind in meta["state"][name].items():
                entry[k] = self.tensors[f"optim/{name}/{k}"].clone() if kind == "tensor" else torch.tensor(kind)
            state[index[id(p)]] = entry
        optimizer.load_state_dict({"state": state, "param_groups": meta["param_groups"]})

    def restore_rngs(self) -> tuple[np.random.Generator | None, torch.Generator | None]:
        rng = self.header["rng"]
        np_rng = gen = None
        if rng.get("numpy") is not None:
            np_rng = np.random.default_rng()
            np_rng.bit_generator.state = rng["numpy"]
        if rng.get("torch") is not None:
            gen = torch.Generator()
            gen.set_state(torch.tensor(rng["torch"], dtype=torch.uint8))
        return np_rng, gen


def load_checkpoint(path: Path | str) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    if raw[:8] != CHECKPOINT_MAGIC or len(raw) < 20:
        raise CheckpointError(f"not a toydrive checkpoint: {path}")
    version, hdr_len = struct.unpack("<IQ", raw[8:20])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} unsupported (expected {CHECKPOINT_VERSION}): {path}")
    try:
        header = json.loads(raw[20:20 + hdr_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header ({exc}): {path}") from None
    base = 20 + hdr_len
    tensors = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        if start + entry["nbytes"] > len(raw):
            raise CheckpointError(f"truncated checkpoint (tensor {entry['name']}): {path}")
        arr = np.frombuffer(raw, dtype="<f4", count=entry["nbytes"] // 4, offset=start).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
    cfg = UNetConfig(**header["model_config"])
    model = MultiViewDiffusionModel(cfg, TextVocabulary(header["vocabulary"]))
    sd = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    model.load_state_dict(sd)
    return Checkpoint(model, header["step"], header, tensors)


# ---------------------------------------------------------------------------
# training


def build_optimizer(model: MultiViewDiffusionModel, cfg: TrainConfig):
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    return opt


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up over ``warmup_steps`` then constant."""
    if cfg.warmup_steps == 0:
        return cfg.lr
    return cfg.lr * min(1.0, (step + 1) / cfg.warmup_steps)


def model_config_for(cfg: TrainConfig) -> UNetConfig:
    ucfg = cfg.unet
    want = len(ROAD_CLASSES) + (len(OBJECT_CLASSES) if cfg.object_footprints_in_map else 0)
    if ucfg.map_channels != want:
        ucfg = dataclasses.replace(ucfg, map_channels=want)
    return ucfg


@dataclass
class TrainResult:
    model: MultiViewDiffusionModel
    losses: list[float]
    checkpoint: Path | None


def train(cfg: TrainConfig, out_dir: Path | str | None = None, dataset: Dataset | None = None,
          resume_from: Path | str | None = None, stop_at: int | None = None) -> TrainResult:
    """Run (or continue) training; returns the model and the per-step losses of this invocation.

    ``stop_at`` ends the run early at that global step (used to exercise resume).
    """
    torch.manual_seed(cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    if dataset is None:
        dataset = read_dataset(cfg.dataset)
    ucfg = model_config_for(cfg)
    vocab = TextVocabulary()
    feats = dataset_features(dataset, ucfg, vocab, footprints=cfg.object_footprints_in_map)
    schedule = cfg.schedule.build()

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        model = ckpt.model
        optimizer = build_optimizer(model, cfg)
        ckpt.restore_optimizer(optimizer)
        np_rng, gen = ckpt.restore_rngs()
        start = ckpt.step
    else:
        model = MultiViewDiffusionModel(ucfg, vocab)
        optimizer = build_optimizer(model, cfg)
        np_rng = np.random.default_rng(cfg.seed)
        gen = torch.Generator().manual_seed(cfg.seed)
        start = 0

    metrics = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_json(), indent=2))
        metrics = open(out / "metrics.jsonl", "a" if resume_from is not None else "w")

    end = cfg.total_steps if stop_at is None else min(stop_at, cfg.total_steps)
    losses = []
    last_ckpt = None
    model.train()
    try:
        for step in range(start, end):
            t0 = time.perf_counter()
            n = len(feats)
            idx = np_rng.choice(n, size=cfg.batch_size, replace=cfg.batch_size > n)
            images, cond = assemble_batch([feats[i] for i in idx], ucfg, np_rng, "train", cfg.augment_rate)
            lr = lr_at(step, cfg)
            for g in optimizer.param_groups:
                g["lr"] = lr
            loss = training_loss(model, images, cond, schedule, gen, cfg.gamma_s)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss {loss.item()} at step {step}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()
            losses.append(loss.item())
            wall_ms = (time.perf_counter() - t0) * 1000
            done = step + 1
            if metrics is not None and (step % cfg.log_every == 0 or done == end):
                metrics.write(json.dumps({"step": step, "loss": losses[-1], "lr": lr, "wall_ms": round(wall_ms, 3)}) + "\n")
                metrics.flush()
            if step % cfg.log_every == 0:
                log.info("step %d loss %.5f lr %.2e (%.0f ms)", step, losses[-1], lr, wall_ms)
            if out is not None and (done % cfg.checkpoint_every == 0 or done == end):
                last_ckpt = out / f"step_{done:07d}.ckpt"
                save_checkpoint(last_ckpt, model, optimizer=optimizer, step=done, train_config=cfg,
                                np_rng=np_rng, torch_gen=gen)
    finally:
        if metrics is not None:
            metrics.close()
    if out is not None and last_ckpt is not None and end == cfg.total_steps:
        final = out / "final.ckpt"
        final.write_bytes(last_ckpt.read_bytes())
        last_ckpt = final
    model.eval()
    return TrainResult(model, losses, last_ckpt)
