"""Oracle-render metrics: object controllability, cross-view colour consistency, reconstruction.

A box's evaluation region in one view is the convex hull of its projected z > 0 corners,
clipped to the image, minus the silhouettes of boxes the renderer paints after it (nearer by
center depth). On an oracle render every pixel of that region carries the box's class colour,
which is what makes the oracle scores exact.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .geometry import box_silhouette, convex_polygon_mask, visible_corner_hull
from .toyworld import OBJECT_CLASSES, RenderConfig, SceneRecord, painter_order


class MetricShapeError(ValueError):
    pass


def as_unit(img: np.ndarray) -> np.ndarray:
    """uint8 images -> float64 in [0, 1]; float input is assumed to be in [0, 1] already."""
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return img.astype(np.float64) / 255.0
    return img.astype(np.float64)


def region_mean(img: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Mean colour in [0, 1] over ``mask``. uint8 input is summed exactly as integers, so a
    uniformly coloured region gives exactly that colour."""
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return img[mask].sum(axis=0, dtype=np.int64) / np.count_nonzero(mask) / 255.0
    return img[mask].astype(np.float64).mean(axis=0)


def box_regions(scene: SceneRecord, view: int, width: int, height: int) -> dict[int, np.ndarray]:
    """Box index -> boolean (H, W) evaluation region for one view (only nonempty regions)."""
    pose = scene.rig.poses[view]
    order = painter_order(scene.boxes, pose)
    silhouettes = {}
    for i in order:
        hull = box_silhouette(scene.boxes[i], pose)
        silhouettes[i] = np.zeros((height, width), bool) if hull is None else convex_polygon_mask(hull, width, height)
    regions = {}
    for rank, i in enumerate(order):
        hull = visible_corner_hull(scene.boxes[i], pose)
        if hull is None:
            continue
        region = convex_polygon_mask(hull, width, height)
        for j in order[rank + 1:]:
            region &= ~silhouettes[j]
        if region.any():
            regions[i] = region
    return regions


def nearest_class(color: np.ndarray, palette: np.ndarray) -> int:
    return int(np.argmin(((palette - color) ** 2).sum(axis=1)))


@dataclass
class ControllabilityResult:
    per_class: dict  # class name -> accuracy or None when the class never appears
    overall: float | None
    correct: dict
    total: dict
    skipped: int  # boxes passing f_viz whose region was empty


def controllability_counts(images: Sequence[np.ndarray], scene: SceneRecord, rc: RenderConfig) -> tuple[dict, dict, int]:
    palette = rc.palette()
    correct = {c: 0 for c in range(len(palette))}
    total = {c: 0 for c in range(len(palette))}
    skipped = 0
    for view, img in enumerate(images):
        h, w = img.shape[:2]
        regions = box_regions(scene, view, w, h)
        for i in painter_order(scene.boxes, scene.rig.poses[view]):
            if i not in regions:
                skipped += 1
                continue
            cls = scene.boxes[i].class_id
            mean = region_mean(img, regions[i])
            total[cls] += 1
            correct[cls] += int(nearest_class(mean, palette) == cls)
    return correct, total, skipped


def summarize_controllability(correct: dict, total: dict, skipped: int) -> ControllabilityResult:
    per_class = {
        OBJECT_CLASSES[c]: (correct[c] / total[c] if total[c] else None) for c in sorted(total)
    }
    n = sum(total.values())
    overall = sum(correct.values()) / n if n else None
    return ControllabilityResult(per_class, overall, dict(correct), dict(total), skipped)


def controllability_score(images: Sequence[np.ndarray], scene: SceneRecord, rc: RenderConfig = RenderConfig()) -> ControllabilityResult:
    """Per-class fraction of visible, in-frame boxes whose region colour maps to the right class."""
    return summarize_controllability(*controllability_counts(images, scene, rc))


def consistency_pairs(scene: SceneRecord) -> list[tuple[int, int]]:
    v = scene.rig.num_views
    if v < 2:
        return []
    return sorted({tuple(sorted((i, (i + 1) % v))) for i in range(v)})


def consistency_distances(images: Sequence[np.ndarray], scene: SceneRecord) -> list[float]:
    """Per-box mean L2 distance between region mean colours over adjacent view pairs."""
    h, w = np.asarray(images[0]).shape[:2]
    regions = [box_regions(scene, v, w, h) for v in range(len(images))]
    means = [{i: region_mean(images[v], r) for i, r in regions[v].items()} for v in range(len(images))]
    out = []
    for i in range(len(scene.boxes)):
        d = [float(np.linalg.norm(means[a][i] - means[b][i]))
             for a, b in consistency_pairs(scene) if i in means[a] and i in means[b]]
        if d:
            out.append(float(np.mean(d)))
    return out


def consistency_score(images: Sequence[np.ndarray], scene: SceneRecord, rc: RenderConfig | None = None) -> float | None:
    """Mean cross-view colour discrepancy of boxes seen in adjacent views; None if there are none."""
    d = consistency_distances(images, scene)
    return float(np.mean(d)) if d else None


def reconstruction_metrics(generated: np.ndarray, reference: np.ndarray) -> dict:
    """MSE over [0, 1]-scaled pixels and PSNR = 10 log10(1 / MSE) (inf for identical images)."""
    a, b = as_unit(generated), as_unit(reference)
    if a.shape != b.shape:
        raise MetricShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(((a - b) ** 2).mean())
    psnr = math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)
    return {"mse": mse, "psnr": psnr}


def gray_baseline(scenes: Sequence[SceneRecord], rc: RenderConfig = RenderConfig(), gray: float = 0.5) -> float | None:
    """Overall controllability of a uniform gray image, from the palette and annotations alone."""
    target = nearest_class(np.full(3, gray), rc.palette())
    hits = n = 0
    for scene in scenes:
        for view in range(scene.rig.num_views):
            for i in box_regions(scene, view, rc.image_w, rc.image_h):
                n += 1
                hits += scene.boxes[i].class_id == target
    return hits / n if n else None


@dataclass
class MetricsReport:
    per_class_accuracy: dict = field(default_factory=dict)
    overall_accuracy: float | None = None
    consistency: float | None = None
    mse: float | None = None
    psnr: float | None = None
    sample_count: int = 0
    skipped_boxes: int = 0
    gray_baseline: float | None = None
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        if d["psnr"] is not None and math.isinf(d["psnr"]):
            d["psnr"] = "inf"
        return d


def evaluate(generated: Sequence[Sequence[np.ndarray]], scenes: Sequence[SceneRecord], rc: RenderConfig,
             oracle: Sequence[Sequence[np.ndarray]] | None = None,
             metrics: Sequence[str] = ("controllability", "consistency", "reconstruction"),
             config: dict | None = None) -> MetricsReport:
    """Aggregate metrics over scenes (box-weighted accuracy, box-weighted consistency, pixel MSE)."""
    report = MetricsReport(sample_count=len(scenes), config=dict(config or {}))
    if "controllability" in metrics:
        correct = {c: 0 for c in range(len(rc.class_colors))}
        total = dict(correct)
        skipped = 0
        for imgs, scene in zip(generated, scenes):
            c, t, s = controllability_counts(imgs, scene, rc)
            for k in correct:
                correct[k] += c[k]
                total[k] += t[k]
            skipped += s
        res = summarize_controllability(correct, total, skipped)
        report.per_class_accuracy = res.per_class
        report.overall_accuracy = res.overall
        report.skipped_boxes = skipped
        report.gray_baseline = gray_baseline(scenes, rc)
    if "consistency" in metrics:
        dists = [d for imgs, scene in zip(generated, scenes) for d in consistency_distances(imgs, scene)]
        report.consistency = float(np.mean(dists)) if dists else None
    if "reconstruction" in metrics and oracle is not None:
        mses = [reconstruction_metrics(np.stack(g), np.stack(o))["mse"] for g, o in zip(generated, oracle)]
        if mses:
            report.mse = float(np.mean(mses))
            report.psnr = math.inf if report.mse == 0 else 10 * math.log10(1 / report.mse)
    return report
