"""Procedural street scenes, a flat-shaded pinhole renderer, prompts and dataset files.

The renderer is deliberately lighting-free: every box is painted in one class color, so the
same object has identical pixels in every view that sees it. Metrics in ``toydrive.metrics``
lean on this.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import (
    BEVMapSpec,
    Box3D,
    CameraIntrinsics,
    CameraPose,
    RoadElement,
    box_corners,
    box_silhouette,
    convex_polygon_mask,
    f_viz,
    points_in_polygon,
    world_to_camera,
)

FORMAT_VERSION = 1

OBJECT_CLASSES = ("car", "truck", "pedestrian", "road barrier")
ROAD_CLASSES = ("drivable", "crossing", "walkway")
LOCATIONS = ("toytown", "pixelburg", "gridville", "boxford")
TIMES_OF_DAY = ("day", "night")
WEATHERS = ("sunny", "rain")

# (length, width, height) ranges in meters per object class.
CLASS_SIZE_RANGES = {
    0: ((3.8, 4.8), (1.7, 2.0), (1.4, 1.7)),
    1: ((6.0, 9.0), (2.3, 2.6), (2.8, 3.5)),
    2: ((0.5, 0.8), (0.5, 0.8), (1.6, 1.9)),
    3: ((1.8, 2.5), (0.4, 0.6), (0.9, 1.1)),
}
VEHICLE_CLASSES = (0, 1)


class DatasetError(IOError):
    """A dataset directory is missing, incomplete or corrupt; ``path`` names the culprit."""

    def __init__(self, message: str, path: Path | str | None = None):
        super().__init__(message if path is None else f"{message}: {path}")
        self.path = None if path is None else Path(path)


@dataclass(frozen=True)
class SceneConfig:
    map_extent: float = 48.0
    map_grid: int = 64
    max_boxes: int = 12
    min_box_distance: float = 4.0
    max_box_distance: float = 22.0
    num_views: int = 3
    image_w: int = 80
    image_h: int = 48
    hfov_deg: float = 70.0
    camera_height: float = 1.5
    rig_preset: str = "front3"

    def bev_spec(self) -> BEVMapSpec:
        return BEVMapSpec(self.map_extent, self.map_extent, self.map_grid, self.map_grid, len(ROAD_CLASSES))


@dataclass
class CameraRig:
    poses: list[CameraPose]
    yaws: list[float]

    def __post_init__(self):
        if len(self.poses) != len(self.yaws) or len(self.poses) < 1:
            raise ValueError("rig needs one yaw per pose")
        diffs = np.diff(self.yaws)
        if np.any(diffs <= 0):
            raise ValueError("rig poses must be ordered by strictly increasing yaw")

    @property
    def num_views(self) -> int:
        return len(self.poses)


RIG_PRESETS = {
    "front3": (-60.0, 0.0, 60.0),
    "surround6": (-120.0, -60.0, 0.0, 60.0, 120.0, 180.0),
}


def default_intrinsics(image_w: int = 80, image_h: int = 48, hfov_deg: float = 70.0) -> CameraIntrinsics:
    f = (image_w / 2) / math.tan(math.radians(hfov_deg) / 2)
    return CameraIntrinsics(f, f, image_w / 2, image_h / 2, image_w, image_h)


def make_rig(config: SceneConfig = SceneConfig()) -> CameraRig:
    yaws_deg = RIG_PRESETS[config.rig_preset]
    if len(yaws_deg) != config.num_views:
        raise ValueError(f"preset {config.rig_preset!r} has {len(yaws_deg)} views, config asks {config.num_views}")
    intr = default_intrinsics(config.image_w, config.image_h, config.hfov_deg)
    yaws = [math.radians(y) for y in yaws_deg]
    poses = [CameraPose.from_yaw(intr, y, (0.0, 0.0, config.camera_height)) for y in yaws]
    return CameraRig(poses, yaws)


@dataclass(eq=False)
class SceneRecord:
    scene_id: str
    road_elements: list[RoadElement]
    boxes: list[Box3D]
    location: str
    time_of_day: str
    weather: str
    rig: CameraRig

    def __eq__(self, other):
        if not isinstance(other, SceneRecord):
            return NotImplemented
        return (
            self.scene_id == other.scene_id
            and self.road_elements == other.road_elements
            and self.boxes == other.boxes
            and (self.location, self.time_of_day, self.weather)
            == (other.location, other.time_of_day, other.weather)
            and self.rig.poses == other.rig.poses
            and self.rig.yaws == other.rig.yaws
        )

    @property
    def attributes(self) -> dict:
        return {"location": self.location, "time_of_day": self.time_of_day, "weather": self.weather}


def _rgb(*c: int) -> tuple[int, int, int]:
    return tuple(int(x) for x in c)


@dataclass(frozen=True)
class RenderConfig:
    image_w: int = 80
    image_h: int = 48
    class_colors: dict = field(
        default_factory=lambda: {
            0: _rgb(220, 40, 40),
            1: _rgb(40, 70, 230),
            2: _rgb(240, 210, 30),
            3: _rgb(200, 40, 210),
        }
    )
    backgrounds: dict = field(
        default_factory=lambda: {
            ("day", "sunny"): _rgb(150, 190, 225),
            ("day", "rain"): _rgb(115, 125, 135),
            ("night", "sunny"): _rgb(25, 25, 60),
            ("night", "rain"): _rgb(20, 40, 40),
        }
    )
    road_colors: dict = field(
        default_factory=lambda: {0: _rgb(85, 85, 85), 1: _rgb(235, 235, 235), 2: _rgb(150, 120, 90)}
    )

    def __post_init__(self):
        colors = list(self.class_colors.values())
        for i in range(len(colors)):
            for j in range(i + 1, len(colors)):
                if max(abs(a - b) for a, b in zip(colors[i], colors[j])) < 64:
                    raise ValueError(f"class colors {colors[i]} and {colors[j]} are closer than 64/255")

    def palette(self) -> np.ndarray:
        """Class colors as a (num_classes, 3) float array in [0, 1], ordered by class id."""
        return np.array([self.class_colors[k] for k in sorted(self.class_colors)], dtype=np.float64) / 255.0

    def to_json(self) -> dict:
        return {
            "image_w": self.image_w,
            "image_h": self.image_h,
            "class_colors": {str(k): list(v) for k, v in self.class_colors.items()},
            "backgrounds": {f"{t}/{w}": list(v) for (t, w), v in self.backgrounds.items()},
            "road_colors": {str(k): list(v) for k, v in self.road_colors.items()},
        }

    @classmethod
    def from_json(cls, d: dict) -> "RenderConfig":
        return cls(
            image_w=d["image_w"],
            image_h=d["image_h"],
            class_colors={int(k): tuple(v) for k, v in d["class_colors"].items()},
            backgrounds={tuple(k.split("/")): tuple(v) for k, v in d["backgrounds"].items()},
            road_colors={int(k): tuple(v) for k, v in d["road_colors"].items()},
        )


# ---------------------------------------------------------------------------
# scene sampling


def _strip_polygon(offset: float, angle: float, curvature: float, width: float, length: float) -> np.ndarray:
    s = np.linspace(-length / 2, length / 2, 17)
    lateral = offset + curvature * s**2
    # tangent of the centerline is (1, 2 c s); offset along its normal
    tx, ty = np.ones_like(s), 2 * curvature * s
    norm = np.hypot(tx, ty)
    nx, ny = -ty / norm, tx / norm
    left = np.stack([s + nx * width / 2, lateral + ny * width / 2], axis=1)
    right = np.stack([s - nx * width / 2, lateral - ny * width / 2], axis=1)
    poly = np.concatenate([left, right[::-1]], axis=0)
    c, si = math.cos(angle), math.sin(angle)
    return poly @ np.array([[c, si], [-si, c]])


def _sample_roads(rng: np.random.Generator, extent: float) -> list[RoadElement]:
    length = extent * 1.5
    elements = []
    n_strips = int(rng.integers(1, 4))
    main_width = float(rng.uniform(7.0, 10.0))
    main_offset = float(rng.uniform(-2.0, 2.0))
    main_curv = float(rng.choice([0.0, rng.uniform(-0.012, 0.012)]))
    elements.append(RoadElement(0, _strip_polygon(main_offset, 0.0, main_curv, main_width, length)))
    for _ in range(n_strips - 1):
        angle = float(rng.uniform(math.pi / 4, 3 * math.pi / 4)) * float(rng.choice([-1, 1]))
        offset = float(rng.uniform(-extent / 3, extent / 3))
        curv = float(rng.choice([0.0, rng.uniform(-0.01, 0.01)]))
        elements.append(RoadElement(0, _strip_polygon(offset, angle, curv, float(rng.uniform(6.0, 9.0)), length)))
    if rng.random() < 0.5:
        for side in (-1, 1):
            off = main_offset + side * (main_width / 2 + 1.5)
            elements.append(RoadElement(2, _strip_polygon(off, 0.0, main_curv, 2.5, length)))
    if rng.random() < 0.5:
        x0 = float(rng.uniform(6.0, 16.0)) * float(rng.choice([-1, 1]))
        half_w = main_width / 2
        rect = np.array([[x0 - 1.5, main_offset - half_w], [x0 + 1.5, main_offset - half_w],
                         [x0 + 1.5, main_offset + half_w], [x0 - 1.5, main_offset + half_w]])
        elements.append(RoadElement(1, rect))
    return elements


def sample_scene(seed: int, config: SceneConfig = SceneConfig(), scene_id: str | None = None) -> SceneRecord:
    """Deterministic procedural scene for ``seed``."""
    rng = np.random.default_rng(seed)
    extent = config.map_extent
    roads = _sample_roads(rng, extent)
    drivable = [e.vertices for e in roads if e.class_id == 0]

    n_target = int(rng.integers(0, config.max_boxes + 1))
    boxes: list[Box3D] = []
    radii: list[float] = []
    half = extent / 2
    for _ in range(n_target):
        cls = int(rng.integers(0, len(OBJECT_CLASSES)))
        dims = [float(rng.uniform(lo, hi)) for lo, hi in CLASS_SIZE_RANGES[cls]]
        yaw = float(rng.uniform(-math.pi, math.pi))
        radius = 0.5 * math.hypot(dims[0], dims[1])
        for _attempt in range(30):
            dist = float(rng.uniform(config.min_box_distance, config.max_box_distance))
            theta = float(rng.uniform(-math.pi, math.pi))
            x, y = dist * math.cos(theta), dist * math.sin(theta)
            if dist < radius + config.min_box_distance:
                continue
            if cls in VEHICLE_CLASSES and not any(points_in_polygon(x, y, p) for p in drivable):
                continue
            if any(math.hypot(x - b.center[0], y - b.center[1]) < radius + r + 0.3 for b, r in zip(boxes, radii)):
                continue
            box = Box3D(cls, (x, y, dims[2] / 2), dims, yaw)
            if np.abs(box_corners(box)[:, :2]).max() >= half:
                continue
            boxes.append(box)
            radii.append(radius)
            break

    return SceneRecord(
        scene_id=scene_id if scene_id is not None else f"s{seed:06d}",
        road_elements=roads,
        boxes=boxes,
        location=str(rng.choice(LOCATIONS)),
        time_of_day=str(rng.choice(TIMES_OF_DAY)),
        weather=str(rng.choice(WEATHERS)),
        rig=make_rig(config),
    )


# ---------------------------------------------------------------------------
# rendering


def _ground_hits(pose: CameraPose, width: int, height: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    intr = pose.intrinsics
    uu, vv = np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5)
    dirs_cam = np.stack([(uu - intr.cx) / intr.fx, (vv - intr.cy) / intr.fy, np.ones_like(uu)], axis=-1)
    dirs = dirs_cam @ pose.rotation  # R^T d for row vectors
    origin = pose.center
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -origin[2] / dirs[..., 2]
    hit = (dirs[..., 2] < 0) & (t > 0)
    gx = origin[0] + t * dirs[..., 0]
    gy = origin[1] + t * dirs[..., 1]
    return gx, gy, hit


def painter_order(boxes: Sequence[Box3D], pose: CameraPose) -> list[int]:
    """Indices of boxes passing f_viz, ordered far-to-near by camera-frame center depth."""
    idx = [i for i, b in enumerate(boxes) if f_viz(b, pose)]
    depth = {i: world_to_camera(boxes[i].center, pose)[2] for i in idx}
    return sorted(idx, key=lambda i: (-depth[i], i))


def render_view(scene: SceneRecord, pose: CameraPose, rc: RenderConfig = RenderConfig(),
                map_extent: float | None = None) -> np.ndarray:
    """Render one (H, W, 3) uint8 view of ``scene``."""
    h, w = rc.image_h, rc.image_w
    img = np.empty((h, w, 3), dtype=np.uint8)
    img[...] = rc.backgrounds[(scene.time_of_day, scene.weather)]

    if scene.road_elements:
        gx, gy, hit = _ground_hits(pose, w, h)
        if map_extent is not None:
            hit &= (np.abs(gx) < map_extent / 2) & (np.abs(gy) < map_extent / 2)
        for cls in sorted({e.class_id for e in scene.road_elements}):
            covered = np.zeros((h, w), dtype=bool)
            for elem in scene.road_elements:
                if elem.class_id == cls:
                    covered |= points_in_polygon(np.where(hit, gx, 1e9), np.where(hit, gy, 1e9), elem.vertices)
            img[covered & hit] = rc.road_colors[cls]

    for i in painter_order(scene.boxes, pose):
        hull = box_silhouette(scene.boxes[i], pose)
        if hull is None:
            continue
        img[convex_polygon_mask(hull, w, h)] = rc.class_colors[scene.boxes[i].class_id]
    return img


def render_rig(scene: SceneRecord, rig: CameraRig | None = None, rc: RenderConfig = RenderConfig(),
               map_extent: float | None = None) -> list[np.ndarray]:
    rig = scene.rig if rig is None else rig
    return [render_view(scene, pose, rc, map_extent) for pose in rig.poses]


def build_prompt(scene: SceneRecord) -> str:
    """``"A driving scene image at {location}. {weather}, {time_of_day}."``"""
    return f"A driving scene image at {scene.location}. {scene.weather}, {scene.time_of_day}."


# ---------------------------------------------------------------------------
# dataset persistence


def scene_to_json(scene: SceneRecord) -> dict:
    views = []
    for pose in scene.rig.poses:
        k = pose.intrinsics
        views.append({
            "fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy, "width": k.width, "height": k.height,
            "rotation": pose.rotation.reshape(-1).tolist(),
            "translation": pose.translation.tolist(),
        })
    return {
        "scene_id": scene.scene_id,
        "road_elements": [{"class": e.class_id, "vertices": e.vertices.tolist()} for e in scene.road_elements],
        "boxes": [
            {"class": b.class_id, "center": b.center.tolist(), "size": b.size.tolist(), "yaw": b.yaw}
            for b in scene.boxes
        ],
        "attributes": scene.attributes,
        "rig": {"yaws": list(scene.rig.yaws), "views": views},
    }


def scene_from_json(d: dict) -> SceneRecord:
    poses = []
    for v in d["rig"]["views"]:
        intr = CameraIntrinsics(v["fx"], v["fy"], v["cx"], v["cy"], v["width"], v["height"])
        poses.append(CameraPose(intr, np.array(v["rotation"]).reshape(3, 3), np.array(v["translation"])))
    attrs = d["attributes"]
    return SceneRecord(
        scene_id=d["scene_id"],
        road_elements=[RoadElement(e["class"], np.array(e["vertices"])) for e in d["road_elements"]],
        boxes=[Box3D(b["class"], b["center"], b["size"], b["yaw"]) for b in d["boxes"]],
        location=attrs["location"],
        time_of_day=attrs["time_of_day"],
        weather=attrs["weather"],
        rig=CameraRig(poses, [float(y) for y in d["rig"]["yaws"]]),
    )


def write_ppm(path: Path, img: np.ndarray) -> None:
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_ppm(path: Path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise DatasetError("missing image file", path) from None
    try:
        tokens, pos = [], 0
        while len(tokens) < 4:
            while raw[pos:pos + 1].isspace():
                pos += 1
            start = pos
            while not raw[pos:pos + 1].isspace():
                pos += 1
            tokens.append(raw[start:pos])
        pos += 1
        if tokens[0] != b"P6" or int(tokens[3]) != 255:
            raise ValueError("not an 8-bit P6 file")
        w, h = int(tokens[1]), int(tokens[2])
        data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
        return data.reshape(h, w, 3).copy()
    except (ValueError, IndexError) as exc:
        raise DatasetError(f"corrupt image file ({exc})", path) from None


@dataclass
class Dataset:
    """In-memory dataset: scenes plus per-scene lists of view images."""

    scenes: list[SceneRecord]
    images: list[list[np.ndarray]]
    config: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.scenes)

    def index(self, scene_id: str) -> int:
        for i, s in enumerate(self.scenes):
            if s.scene_id == scene_id:
                return i
        raise KeyError(scene_id)

    def subset(self, indices: Iterable[int]) -> "Dataset":
        idx = list(indices)
        return Dataset([self.scenes[i] for i in idx], [self.images[i] for i in idx], dict(self.config))


def write_dataset(dataset: Dataset, directory: Path | str) -> None:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    with open(directory / "scenes.jsonl", "w") as f:
        for scene, views in zip(dataset.scenes, dataset.images):
            f.write(json.dumps(scene_to_json(scene)) + "\n")
            for v, img in enumerate(views):
                write_ppm(directory / "images" / f"{scene.scene_id}_{v}.ppm", img)
    manifest = {"format_version": FORMAT_VERSION, "config": dataset.config, "scene_count": len(dataset.scenes)}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def read_dataset(directory: Path | str) -> Dataset:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise DatasetError("no manifest", manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"corrupt manifest ({exc})", manifest_path) from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"unsupported format version {manifest.get('format_version')}", manifest_path)
    scenes_path = directory / "scenes.jsonl"
    if not scenes_path.is_file():
        raise DatasetError("missing scenes file", scenes_path)
    scenes, images = [], []
    for lineno, line in enumerate(scenes_path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            scene = scene_from_json(json.loads(line))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"corrupt scene record at line {lineno} ({exc})", scenes_path) from None
        scenes.append(scene)
        images.append([
            read_ppm(directory / "images" / f"{scene.scene_id}_{v}.ppm") for v in range(scene.rig.num_views)
        ])
    if len(scenes) != manifest.get("scene_count"):
        raise DatasetError(f"manifest lists {manifest.get('scene_count')} scenes, found {len(scenes)}", scenes_path)
    return Dataset(scenes, images, manifest.get("config", {}))


def generate_dataset(num_scenes: int, seed: int, config: SceneConfig = SceneConfig(),
                     rc: RenderConfig | None = None) -> Dataset:
    """Sample and render ``num_scenes`` scenes; scene k uses seed ``seed * 1_000_003 + k``."""
    rc = rc or RenderConfig(image_w=config.image_w, image_h=config.image_h)
    scenes, images = [], []
    for k in range(num_scenes):
        scene = sample_scene(seed * 1_000_003 + k, config, scene_id=f"s{seed}_{k:06d}")
        scenes.append(scene)
        images.append(render_rig(scene, rc=rc, map_extent=config.map_extent))
    cfg = {"scene": asdict(config), "render": rc.to_json(), "seed": seed, "num_scenes": num_scenes}
    return Dataset(scenes, images, cfg)
