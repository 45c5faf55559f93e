"""Camera models, box geometry, visibility, Fourier features and BEV rasterization.

Frames
------
Ego/world: x forward, y left, z up (meters), origin at the ego vehicle.
Camera: +z forward, +x right, +y down. ``world_to_camera`` applies ``R @ p + T``.

Everything here is numpy float64 and side-effect free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ORTHO_TOL = 1e-6


class GeometryError(ValueError):
    """Raised on invalid geometric input (bad intrinsics, points behind the camera, ...)."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]], dtype=np.float64
        )


@dataclass(frozen=True, eq=False)
class CameraPose:
    """Intrinsics plus the rigid ego->camera transform."""

    intrinsics: CameraIntrinsics
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        err = np.abs(rot @ rot.T - np.eye(3)).max()
        if err > ORTHO_TOL:
            raise GeometryError(f"rotation is not orthonormal (max |RR^T - I| = {err:.3g})")
        if abs(np.linalg.det(rot) - 1.0) > ORTHO_TOL:
            raise GeometryError("rotation must have determinant +1")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    def __eq__(self, other):
        if not isinstance(other, CameraPose):
            return NotImplemented
        return (
            self.intrinsics == other.intrinsics
            and np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
        )

    @property
    def center(self) -> np.ndarray:
        """Camera position in the ego frame."""
        return -self.rotation.T @ self.translation

    @classmethod
    def from_yaw(
        cls,
        intrinsics: CameraIntrinsics,
        yaw: float,
        position: Sequence[float] = (0.0, 0.0, 1.5),
        pitch: float = 0.0,
    ) -> "CameraPose":
        """Camera at ``position`` looking along ego heading ``yaw`` (radians, CCW from +x).

        Positive ``pitch`` tilts the optical axis down toward the ground.
        """
        cy, sy = math.cos(yaw), math.sin(yaw)
        cp, sp = math.cos(pitch), math.sin(pitch)
        forward = np.array([cy * cp, sy * cp, -sp])
        right = np.array([sy, -cy, 0.0])
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        trans = -rot @ np.asarray(position, dtype=np.float64)
        return cls(intrinsics, rot, trans)


@dataclass(frozen=True, eq=False)
class Box3D:
    class_id: int
    center: np.ndarray
    size: np.ndarray  # (length, width, height)
    yaw: float

    def __post_init__(self):
        center = np.asarray(self.center, dtype=np.float64).reshape(3)
        size = np.asarray(self.size, dtype=np.float64).reshape(3)
        if not np.all(size > 0):
            raise GeometryError(f"box size must be strictly positive, got {size.tolist()}")
        if not -math.pi <= self.yaw <= math.pi:
            raise GeometryError(f"yaw {self.yaw} outside [-pi, pi]")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "yaw", float(self.yaw))
        object.__setattr__(self, "class_id", int(self.class_id))

    def __eq__(self, other):
        if not isinstance(other, Box3D):
            return NotImplemented
        return (
            self.class_id == other.class_id
            and np.array_equal(self.center, other.center)
            and np.array_equal(self.size, other.size)
            and self.yaw == other.yaw
        )


@dataclass(frozen=True)
class BEVMapSpec:
    extent_x: float
    extent_y: float
    grid_w: int
    grid_h: int
    num_classes: int

    def __post_init__(self):
        if min(self.extent_x, self.extent_y) <= 0 or min(self.grid_w, self.grid_h, self.num_classes) <= 0:
            raise GeometryError(f"BEV spec dimensions must be positive: {self}")

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Ego-frame (x, y) of every cell center, each shaped (grid_w, grid_h)."""
        xs = -self.extent_x / 2 + (np.arange(self.grid_w) + 0.5) * self.extent_x / self.grid_w
        ys = -self.extent_y / 2 + (np.arange(self.grid_h) + 0.5) * self.extent_y / self.grid_h
        return np.meshgrid(xs, ys, indexing="ij")

    def cell_index(self, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Cell indices for ego-frame points and a mask of points inside the extent."""
        i = np.floor((np.asarray(x) + self.extent_x / 2) / self.extent_x * self.grid_w).astype(np.int64)
        j = np.floor((np.asarray(y) + self.extent_y / 2) / self.extent_y * self.grid_h).astype(np.int64)
        inside = (i >= 0) & (i < self.grid_w) & (j >= 0) & (j < self.grid_h)
        return np.clip(i, 0, self.grid_w - 1), np.clip(j, 0, self.grid_h - 1), inside


@dataclass(frozen=True, eq=False)
class BEVMap:
    spec: BEVMapSpec
    data: np.ndarray  # uint8, (grid_w, grid_h, num_classes)

    def __post_init__(self):
        s = self.spec
        if self.data.shape != (s.grid_w, s.grid_h, s.num_classes):
            raise GeometryError(f"map data shape {self.data.shape} does not match {s}")
        if not np.isin(self.data, (0, 1)).all():
            raise GeometryError("BEV map entries must be 0 or 1")

    @classmethod
    def zeros(cls, spec: BEVMapSpec) -> "BEVMap":
        return cls(spec, np.zeros((spec.grid_w, spec.grid_h, spec.num_classes), dtype=np.uint8))

    def __eq__(self, other):
        if not isinstance(other, BEVMap):
            return NotImplemented
        return self.spec == other.spec and np.array_equal(self.data, other.data)


# Corner i has local signs (bit0 -> x, bit1 -> y, bit2 -> z); a clear bit means the negative side.
CORNER_SIGNS = np.array(
    [[1 if (i >> b) & 1 else -1 for b in range(3)] for i in range(8)], dtype=np.float64
)


def yaw_matrix(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def box_corners(box: Box3D) -> np.ndarray:
    """8x3 ego-frame corners; row i uses the sign pattern ``CORNER_SIGNS[i]``."""
    local = CORNER_SIGNS * (box.size / 2.0)
    return local @ yaw_matrix(box.yaw).T + box.center


def world_to_camera(point: np.ndarray, pose: CameraPose) -> np.ndarray:
    """Map ego-frame point(s) of shape (..., 3) into the camera frame."""
    p = np.asarray(point, dtype=np.float64)
    return p @ pose.rotation.T + pose.translation


def project(point_cam: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Pinhole projection of camera-frame point(s) (..., 3) to pixel coordinates (..., 2).

    Results may fall outside the image; clipping is the caller's job.
    """
    p = np.asarray(point_cam, dtype=np.float64)
    z = p[..., 2]
    if np.any(z <= 0):
        raise GeometryError("cannot project a point with z <= 0")
    u = intr.fx * p[..., 0] / z + intr.cx
    v = intr.fy * p[..., 1] / z + intr.cy
    return np.stack([u, v], axis=-1)


def f_viz(box: Box3D, pose: CameraPose) -> bool:
    """True iff at least one corner lies in front of the camera (z > 0). FOV is ignored."""
    return bool(world_to_camera(box_corners(box), pose)[:, 2].max() > 0)


def fourier_embed(v: np.ndarray, num_bands: int = 4) -> np.ndarray:
    """Sin/cos features of (..., 3) vectors -> (..., 6 * num_bands).

    Layout per band k: [sin(2^k pi v_0..2), cos(2^k pi v_0..2)], bands in increasing k.
    """
    if num_bands < 1:
        raise GeometryError("num_bands must be >= 1")
    v = np.asarray(v, dtype=np.float64)
    parts = []
    for k in range(num_bands):
        arg = (2.0**k) * math.pi * v
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return np.concatenate(parts, axis=-1)


def flatten_pose(pose: CameraPose) -> np.ndarray:
    """7x3 matrix: rows 0-2 are K, rows 3-5 are R, row 6 is T."""
    return np.concatenate(
        [pose.intrinsics.matrix, pose.rotation, pose.translation[None, :]], axis=0
    )


def unflatten_pose(flat: np.ndarray, width: int, height: int) -> CameraPose:
    flat = np.asarray(flat, dtype=np.float64)
    k = flat[0:3]
    intr = CameraIntrinsics(k[0, 0], k[1, 1], k[0, 2], k[1, 2], width, height)
    return CameraPose(intr, flat[3:6], flat[6])


def points_in_polygon(x: np.ndarray, y: np.ndarray, polygon: np.ndarray) -> np.ndarray:
    """Even-odd crossing test for a simple polygon given as (V, 2) vertices."""
    poly = np.asarray(polygon, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    inside = np.zeros(np.broadcast(x, y).shape, dtype=bool)
    x0, y0 = poly[:, 0], poly[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    for ax, ay, bx, by in zip(x0, y0, x1, y1):
        if ay == by:
            continue
        crosses = (ay > y) != (by > y)
        x_int = ax + (y - ay) * (bx - ax) / (by - ay)
        inside ^= crosses & (x < x_int)
    return inside


@dataclass(frozen=True, eq=False)
class RoadElement:
    """A class-tagged ground polygon (ego-frame x, y vertices)."""

    class_id: int
    vertices: np.ndarray = field(repr=False)

    def __post_init__(self):
        verts = np.asarray(self.vertices, dtype=np.float64)
        if verts.ndim != 2 or verts.shape[1] != 2 or len(verts) < 3:
            raise GeometryError(f"road polygon needs >= 3 (x, y) vertices, got shape {verts.shape}")
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "class_id", int(self.class_id))

    def __eq__(self, other):
        if not isinstance(other, RoadElement):
            return NotImplemented
        return self.class_id == other.class_id and np.array_equal(self.vertices, other.vertices)


def rasterize_map(road_elements: Sequence[RoadElement], spec: BEVMapSpec) -> BEVMap:
    """Cell (i, j, k) is 1 iff the cell center falls inside some class-k polygon."""
    data = np.zeros((spec.grid_w, spec.grid_h, spec.num_classes), dtype=np.uint8)
    cx, cy = spec.cell_centers()
    for elem in road_elements:
        if not 0 <= elem.class_id < spec.num_classes:
            raise GeometryError(f"road class {elem.class_id} outside [0, {spec.num_classes})")
        data[:, :, elem.class_id] |= points_in_polygon(cx, cy, elem.vertices).astype(np.uint8)
    return BEVMap(spec, data)


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Counter-clockwise convex hull (monotone chain) of (N, 2) points."""
    pts = sorted(set(map(tuple, np.asarray(points, dtype=np.float64).tolist())))
    if len(pts) <= 2:
        return np.array(pts, dtype=np.float64).reshape(-1, 2)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1], dtype=np.float64)


def convex_polygon_mask(hull: np.ndarray, width: int, height: int) -> np.ndarray:
    """Boolean (height, width) mask of pixel centers inside a CCW convex polygon.

    Pixel (row v, col u) has its center at (u + 0.5, v + 0.5). Points on an edge count as inside.
    """
    mask = np.zeros((height, width), dtype=bool)
    if len(hull) < 3:
        return mask
    umin, vmin = np.floor(hull.min(axis=0)).astype(int)
    umax, vmax = np.ceil(hull.max(axis=0)).astype(int)
    u0, u1 = max(umin, 0), min(umax + 1, width)
    v0, v1 = max(vmin, 0), min(vmax + 1, height)
    if u0 >= u1 or v0 >= v1:
        return mask
    uu, vv = np.meshgrid(np.arange(u0, u1) + 0.5, np.arange(v0, v1) + 0.5)
    inside = np.ones(uu.shape, dtype=bool)
    nxt = np.roll(hull, -1, axis=0)
    for (ax, ay), (bx, by) in zip(hull, nxt):
        inside &= (bx - ax) * (vv - ay) - (by - ay) * (uu - ax) >= 0
    mask[v0:v1, u0:u1] = inside
    return mask


# Faces of the cuboid as corner-index quads (each pair differs in one sign bit).
BOX_EDGES = [(i, i ^ (1 << b)) for i in range(8) for b in range(3) if not i & (1 << b)]


def box_silhouette(box: Box3D, pose: CameraPose, near: float = 1e-3) -> np.ndarray | None:
    """Image-plane convex hull of the box clipped to z >= near, or None if nothing is in front.

    For a convex solid entirely in front of the camera, its projection equals the hull of the
    projected vertices; clipping against the near plane keeps that true for straddling boxes.
    """
    cam = world_to_camera(box_corners(box), pose)
    front = cam[:, 2] > 0
    if not front.any():
        return None
    # every z > 0 corner must survive so the visible-corner hull stays inside the silhouette
    near = min(near, float(cam[front, 2].min()))
    pts = [c for c in cam if c[2] >= near]
    for i, j in BOX_EDGES:
        zi, zj = cam[i, 2], cam[j, 2]
        if (zi - near) * (zj - near) < 0:
            t = (near - zi) / (zj - zi)
            pts.append(cam[i] + t * (cam[j] - cam[i]))
    uv = project(np.array(pts), pose.intrinsics)
    return convex_hull(uv)


def visible_corner_hull(box: Box3D, pose: CameraPose) -> np.ndarray | None:
    """Convex hull of the projections of the corners with z > 0 (None if there are none)."""
    cam = world_to_camera(box_corners(box), pose)
    front = cam[cam[:, 2] > 0]
    if len(front) == 0:
        return None
    return convex_hull(project(front, pose.intrinsics))
