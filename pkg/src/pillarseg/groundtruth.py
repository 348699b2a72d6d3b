"""Sparse and dense top-view ground truth from point-wise labels.

A cell's label is the weighted argmax over the per-class point counts in it,
so that small traffic participants win over the surrounding road points.
Dense ground truth superimposes the static points of neighbouring scans
(aligned by their poses) before counting.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .dataset_io import (
    NUM_CLASSES,
    PERSON,
    RIDER,
    TWO_WHEEL,
    UNLABELED,
    VEHICLE,
    LabelSet,
    PointCloud,
    Pose,
    check_pair,
    relative_pose,
    transform_cloud,
)
from .grid import GridSpec, voxel_indices

NEIGHBOR_METRICS = ("euclidean", "along_track")


@dataclass(eq=False)
class SemanticGrid:
    """``(W, H)`` uint8 class ids, 255 where no labelled point fell."""

    class_id: np.ndarray

    @property
    def labeled(self) -> np.ndarray:
        return self.class_id != UNLABELED


@dataclass(eq=False)
class CellCounts:
    """``(W, H, 12)`` number of labelled points per cell and class."""

    counts: np.ndarray


def default_gt_weights() -> np.ndarray:
    """Traffic participants count five times, every other class once."""
    w = np.ones(NUM_CLASSES)
    w[[VEHICLE, PERSON, TWO_WHEEL, RIDER]] = 5.0
    return w


def _check_weights(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape != (NUM_CLASSES,):
        raise ValueError(f"expected {NUM_CLASSES} class weights, got {w.shape[0]}")
    if not np.all(np.isfinite(w)) or (w < 0).any():
        raise ValueError("class weights must be finite and nonnegative")
    return w


def count_cells(cloud: PointCloud, labels: LabelSet, spec: GridSpec) -> CellCounts:
    """Per-cell class histogram of the labelled points inside the crop box."""
    check_pair(cloud, labels)
    idx, inside = voxel_indices(cloud.xyz, spec)
    keep = inside & (labels.class_id != UNLABELED)
    lin = (idx[keep, 0] * spec.H + idx[keep, 1]) * NUM_CLASSES + labels.class_id[keep]
    counts = np.bincount(lin, minlength=spec.W * spec.H * NUM_CLASSES)
    return CellCounts(counts.reshape(spec.W, spec.H, NUM_CLASSES))


def weighted_argmax(counts: CellCounts | np.ndarray, weights=None) -> SemanticGrid:
    """Class with the largest ``w_k * n_k`` per cell; smallest id on ties, 255 if all scores are 0."""
    n = counts.counts if isinstance(counts, CellCounts) else np.asarray(counts)
    w = default_gt_weights() if weights is None else _check_weights(weights)
    scores = n * w
    # argmax returns the first maximum, i.e. the smallest class id
    best = np.argmax(scores, axis=-1).astype(np.uint8)
    best[scores.max(axis=-1) <= 0] = UNLABELED
    return SemanticGrid(best)


def sparse_gt(cloud: PointCloud, labels: LabelSet, spec: GridSpec, weights=None) -> SemanticGrid:
    return weighted_argmax(count_cells(cloud, labels, spec), weights)


@dataclass(frozen=True)
class NeighborConfig:
    """Neighbour scans lie closer than ``2 * d`` to the current sensor position.

    ``metric`` is ``"euclidean"`` (distance between pose translations) or
    ``"along_track"`` (absolute forward displacement in the current scan's frame).
    """

    d: float = 80.0
    max_scans: int = 40
    metric: str = "euclidean"

    def __post_init__(self):
        if not self.d > 0:
            raise ValueError(f"d must be positive, got {self.d}")
        if self.max_scans < 1:
            raise ValueError(f"max_scans must be at least 1, got {self.max_scans}")
        if self.metric not in NEIGHBOR_METRICS:
            raise ValueError(f"metric must be one of {NEIGHBOR_METRICS}, got {self.metric!r}")


def select_neighbors(poses: Sequence[Pose], idx: int, cfg: Optional[NeighborConfig] = None) -> list[int]:
    """Scans within ``2 * d`` of scan ``idx``, nearest first, at most ``max_scans``.

    ``idx`` itself always comes first; equal distances keep index order.
    """
    cfg = cfg or NeighborConfig()
    if not 0 <= idx < len(poses):
        raise IndexError(f"scan index {idx} out of range for {len(poses)} poses")
    t = np.stack([p.translation for p in poses])
    delta = t - t[idx]
    if cfg.metric == "euclidean":
        dist = np.linalg.norm(delta, axis=1)
    else:
        dist = np.abs(delta @ poses[idx].rotation[:, 0])
    dist[idx] = -1.0
    cand = np.flatnonzero(dist < 2.0 * cfg.d)
    cand = cand[np.argsort(dist[cand], kind="stable")]
    return [int(j) for j in cand[: cfg.max_scans]]


def aggregate_scans(
    scans: Sequence[PointCloud],
    labels: Sequence[LabelSet],
    poses: Sequence[Pose],
    idx: int,
    neighbors: Sequence[int],
) -> tuple[PointCloud, LabelSet]:
    """Superimpose the neighbour scans in the frame of scan ``idx``.

    Scan ``idx`` contributes all points; the others only their static points.
    """
    clouds, sets = [], []
    for j in neighbors:
        cloud, lab = scans[j], labels[j]
        check_pair(cloud, lab)
        if j != idx:
            keep = ~lab.moving
            cloud = transform_cloud(PointCloud(cloud.points[keep], cloud.frame_id), relative_pose(poses[idx], poses[j]))
            lab = lab.subset(keep)
        clouds.append(cloud.points)
        sets.append(lab)
    if not clouds:
        return PointCloud.empty(idx), LabelSet(np.zeros(0), np.zeros(0))
    merged = LabelSet(np.concatenate([s.class_id for s in sets]), np.concatenate([s.moving for s in sets]))
    return PointCloud(np.concatenate(clouds), idx), merged


def dense_gt(
    scans: Sequence[PointCloud],
    labels: Sequence[LabelSet],
    poses: Sequence[Pose],
    idx: int,
    spec: GridSpec,
    weights=None,
    cfg: Optional[NeighborConfig] = None,
    neighbors: Optional[Sequence[int]] = None,
) -> SemanticGrid:
    """Weighted argmax over the aggregated counts of scan ``idx`` and its static neighbours."""
    if neighbors is None:
        neighbors = select_neighbors(poses, idx, cfg)
    w = default_gt_weights() if weights is None else _check_weights(weights)
    total = np.zeros((spec.W, spec.H, NUM_CLASSES), dtype=np.int64)
    for j in neighbors:
        cloud, lab = aggregate_scans(scans, labels, poses, idx, [j])
        total += count_cells(cloud, lab, spec).counts
    return weighted_argmax(CellCounts(total), w)
