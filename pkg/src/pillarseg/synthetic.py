"""Analytic LiDAR rendering of small labelled scenes.

Scenes consist of horizontal plane patches and oriented boxes. Each ray of
an azimuth/elevation fan is intersected with every primitive and the first
hit becomes a point carrying that primitive's class. Coordinates are
rounded to float32 so that written scans parse back to identical clouds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dataset_io import (
    BUILDING,
    NUM_CLASSES,
    OBJECT,
    PERSON,
    ROAD,
    SIDEWALK,
    TERRAIN,
    TRUNK,
    TWO_WHEEL,
    VEGETATION,
    VEHICLE,
    LabelSet,
    PointCloud,
    Pose,
    SequenceLayout,
    write_sequence,
)
from .errors import IoFailure

PRIMITIVE_SHAPES = ("plane", "box")
GROUND_Z = -1.7


def class_reflectance(class_id: int) -> float:
    return round(0.05 + 0.075 * class_id, 3)


def yaw_pose(x: float, y: float, z: float, yaw: float = 0.0) -> Pose:
    c, s = math.cos(yaw), math.sin(yaw)
    return Pose(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]), np.array([x, y, z]))


@dataclass(frozen=True, eq=False)
class Primitive:
    """A labelled surface in world coordinates.

    ``plane``: horizontal patch ``|x| <= sx/2, |y| <= sy/2`` at local ``z = 0``
    (``size = (sx, sy)``). ``box``: local ``|x| <= lx/2`` etc.
    (``size = (lx, ly, lz)``) centred at the pose translation. Moving
    primitives are displaced by ``velocity * time``.
    """

    shape: str
    class_id: int
    pose: Pose
    size: tuple[float, ...]
    moving: bool = False
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.shape not in PRIMITIVE_SHAPES:
            raise ValueError(f"shape must be one of {PRIMITIVE_SHAPES}, got {self.shape!r}")
        if not 0 <= self.class_id < NUM_CLASSES:
            raise ValueError(f"class id {self.class_id} out of range")
        need = 2 if self.shape == "plane" else 3
        if len(self.size) != need or min(self.size) <= 0:
            raise ValueError(f"{self.shape} needs {need} positive sizes, got {self.size}")

    def pose_at(self, time: float) -> Pose:
        if not self.moving or time == 0.0:
            return self.pose
        return Pose(self.pose.rotation, self.pose.translation + time * np.asarray(self.velocity))

    def contains(self, xyz: np.ndarray, time: float = 0.0, tol: float = 1e-4) -> np.ndarray:
        """Points lying on the primitive's surface (within ``tol``)."""
        local = (np.asarray(xyz) - self.pose_at(time).translation) @ self.pose_at(time).rotation
        h = np.asarray(self.size) / 2
        if self.shape == "plane":
            return (np.abs(local[:, 2]) <= tol) & np.all(np.abs(local[:, :2]) <= h + tol, axis=1)
        inside = np.all(np.abs(local) <= h + tol, axis=1)
        on_face = np.any(np.abs(np.abs(local) - h) <= tol, axis=1)
        return inside & on_face

    def intersect(self, origin: np.ndarray, dirs: np.ndarray, time: float = 0.0) -> np.ndarray:
        """Ray parameter of the first hit per direction, ``inf`` for misses."""
        pose = self.pose_at(time)
        o = pose.rotation.T @ (origin - pose.translation)
        d = dirs @ pose.rotation
        h = np.asarray(self.size) / 2
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.shape == "plane":
                t = -o[2] / d[:, 2]
                p = o[:2] + t[:, None] * d[:, :2]
                ok = (t > 1e-9) & np.all(np.abs(p) <= h, axis=1)
                return np.where(ok, t, np.inf)
            ta = (-h - o) / d
            tb = (h - o) / d
            tn = np.nanmax(np.where(d == 0, -np.inf, np.minimum(ta, tb)), axis=1)
            tf = np.nanmin(np.where(d == 0, np.inf, np.maximum(ta, tb)), axis=1)
            # rays parallel to a slab must start inside it
            par = np.any((d == 0) & (np.abs(o) > h), axis=1)
        t = np.where(tn > 1e-9, tn, tf)
        ok = ~par & (tn <= tf) & (t > 1e-9)
        return np.where(ok, t, np.inf)


@dataclass(frozen=True, eq=False)
class SceneSpec:
    """Primitives plus the sensor's ray fan.

    Elevations are in radians; azimuths are spread uniformly over the full
    circle starting at ``azimuth_offset``.
    """

    primitives: Sequence[Primitive] = ()
    seed: int = 0
    extent: float = 50.0
    azimuth_count: int = 360
    elevation_count: int = 16
    elevation_range: tuple[float, float] = (math.radians(-25.0), math.radians(3.0))
    azimuth_offset: float = 0.0
    max_range: float = 100.0

    def directions(self) -> np.ndarray:
        az = self.azimuth_offset + 2.0 * math.pi * np.arange(self.azimuth_count) / self.azimuth_count
        if self.elevation_count == 1:
            el = np.array([self.elevation_range[0]])
        else:
            el = np.linspace(self.elevation_range[0], self.elevation_range[1], self.elevation_count)
        a, e = np.meshgrid(az, el, indexing="ij")
        a, e = a.reshape(-1), e.reshape(-1)
        return np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], axis=1)


def render_rays(
    scene: SceneSpec, sensor_pose: Pose, dirs: np.ndarray, time: float = 0.0
) -> tuple[PointCloud, LabelSet]:
    """First hits of sensor-frame directions ``dirs``, returned in the sensor frame."""
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    origin = sensor_pose.translation
    world_dirs = dirs @ sensor_pose.rotation.T
    best_t = np.full(len(dirs), np.inf)
    best_k = np.full(len(dirs), -1)
    for k, prim in enumerate(scene.primitives):
        t = prim.intersect(origin, world_dirs, time)
        closer = t < best_t
        best_t[closer] = t[closer]
        best_k[closer] = k
    hit = np.isfinite(best_t) & (best_t <= scene.max_range)
    local = dirs[hit] * best_t[hit, None]
    prims = [scene.primitives[k] for k in best_k[hit]]
    cls = np.array([p.class_id for p in prims], dtype=np.uint8)
    moving = np.array([p.moving for p in prims], dtype=bool)
    refl = np.array([class_reflectance(int(c)) for c in cls])
    pts = np.concatenate([local, refl[:, None]], axis=1).astype(np.float32).astype(np.float64)
    return PointCloud(pts.reshape(-1, 4)), LabelSet(cls, moving)


def render_scan(scene: SceneSpec, sensor_pose: Optional[Pose] = None, time: float = 0.0) -> tuple[PointCloud, LabelSet]:
    """Ray-cast the scene's fan from ``sensor_pose`` (sensor to world)."""
    return render_rays(scene, sensor_pose or Pose.identity(), scene.directions(), time)


@dataclass(eq=False)
class RenderedSequence:
    clouds: list[PointCloud]
    labels: list[LabelSet]
    poses: list[Pose]
    layout: Optional[SequenceLayout] = None


def render_sequence(
    scene: SceneSpec,
    trajectory: Sequence[Pose],
    root=None,
    times: Optional[Sequence[float]] = None,
) -> RenderedSequence:
    """Render one scan per pose (frame ``n`` at time ``n`` unless given) and optionally write KITTI files."""
    if len(trajectory) == 0:
        raise ValueError("trajectory must contain at least one pose")
    times = list(range(len(trajectory))) if times is None else list(times)
    clouds, labels = [], []
    for n, (pose, t) in enumerate(zip(trajectory, times)):
        cloud, lab = render_scan(scene, pose, float(t))
        clouds.append(PointCloud(cloud.points, n))
        labels.append(lab)
    layout = None
    if root is not None:
        try:
            layout = write_sequence(root, clouds, labels, list(trajectory))
        except OSError as exc:
            raise IoFailure(f"cannot write sequence to {root}: {exc}") from exc
    return RenderedSequence(clouds, labels, list(trajectory), layout)


def _box(cls: int, x: float, y: float, l: float, w: float, h: float, yaw: float = 0.0, **kw) -> Primitive:
    return Primitive("box", cls, yaw_pose(x, y, GROUND_Z + h / 2, yaw), (l, w, h), **kw)


def street_scene(seed: int = 0, half_length: float = 6.4, half_width: float = 3.2, **fan) -> SceneSpec:
    """A short street: road, sidewalk, terrain, a wall, parked cars, a pedestrian, a bike, a fence and a tree.

    The layout fills ``|x| <= half_length, |y| <= half_width`` around the
    sensor; object positions and sizes are jittered by ``seed``.
    """
    rng = np.random.default_rng(seed)
    L, Wd = half_length, half_width
    side = 0.5 * Wd
    outer = Wd + 2.0
    prims = [
        Primitive("plane", ROAD, yaw_pose(0, 0, GROUND_Z), (2 * L + 4, 2 * side)),
        Primitive("plane", SIDEWALK, yaw_pose(0, (side + outer) / 2, GROUND_Z), (2 * L + 4, outer - side)),
        Primitive("plane", TERRAIN, yaw_pose(0, -(side + outer) / 2, GROUND_Z), (2 * L + 4, outer - side)),
        _box(BUILDING, 0, Wd - 0.3, 2 * L + 4, 0.6, 4.0),
    ]
    for sign in (-1, 1):
        x = sign * rng.uniform(0.45 * L, 0.65 * L)
        prims.append(_box(VEHICLE, x, rng.uniform(-0.2, 0.2) * side, rng.uniform(3.6, 4.2), rng.uniform(1.6, 1.8), rng.uniform(1.4, 1.6), rng.uniform(-0.1, 0.1)))
    prims.append(_box(PERSON, rng.uniform(-0.3, 0.3) * L, rng.uniform(side + 0.35, Wd - 0.95), 0.6, 0.6, 1.75))
    prims.append(_box(TWO_WHEEL, rng.uniform(-0.35, 0.35) * L, rng.uniform(0.5, 0.7) * side, 1.7, 0.6, 1.0, rng.uniform(-0.2, 0.2)))
    tx, ty = rng.uniform(0.5, 0.8) * L, -(side + Wd) / 2
    prims.append(_box(TRUNK, tx, ty, 0.6, 0.6, 2.2))
    prims.append(Primitive("box", VEGETATION, yaw_pose(tx, ty, GROUND_Z + 3.9), (2.0, 1.4, 1.4)))
    prims.append(_box(VEGETATION, -rng.uniform(0.0, 0.25) * L, -Wd + 0.5, rng.uniform(2.0, 3.0), 0.8, 1.0))
    # fence segment along the terrain edge
    prims.append(_box(OBJECT, -rng.uniform(0.5, 0.75) * L, -side - 0.2, rng.uniform(2.0, 3.0), 0.3, 1.2))
    return SceneSpec(tuple(prims), seed=seed, extent=max(L, Wd) + 2.0, **fan)


TOY_FAN = dict(azimuth_count=720, elevation_count=32, elevation_range=(math.radians(-60.0), math.radians(5.0)))


def random_scene(seed: int, extent: float = 8.0, n_boxes: int = 6, **fan) -> SceneSpec:
    """Ground patches of random classes plus randomly labelled boxes."""
    rng = np.random.default_rng(seed)
    prims = [Primitive("plane", ROAD, yaw_pose(0, 0, GROUND_Z), (2 * extent, 2 * extent))]
    for _ in range(2):
        cls = int(rng.choice([SIDEWALK, TERRAIN]))
        cx, cy = rng.uniform(-extent / 2, extent / 2, 2)
        prims.append(Primitive("plane", cls, yaw_pose(cx, cy, GROUND_Z + 0.01), tuple(rng.uniform(1.0, extent / 2, 2))))
    box_classes = [VEHICLE, PERSON, TWO_WHEEL, BUILDING, OBJECT, VEGETATION, TRUNK]
    for _ in range(n_boxes):
        cls = int(rng.choice(box_classes))
        r = rng.uniform(2.0, extent - 1.0)
        a = rng.uniform(0, 2 * math.pi)
        size = rng.uniform(0.4, 2.5, 3)
        prims.append(_box(cls, r * math.cos(a), r * math.sin(a), *size, yaw=float(rng.uniform(-math.pi, math.pi))))
    return SceneSpec(tuple(prims), seed=seed, extent=extent, **fan)


def straight_trajectory(n: int, step: float = 1.0, heading: float = 0.0) -> list[Pose]:
    """``n`` sensor poses along a line, 1.7 m above the ground plane origin."""
    return [yaw_pose(k * step * math.cos(heading), k * step * math.sin(heading), 0.0, heading) for k in range(n)]
