"""Pillar grouping, the simplified PointNet and the scatter to a pseudo image."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .dataset_io import PointCloud
from .engine import BatchNormState, Tensor, batchnorm, linear, max_over_axis, place, relu, take_rows
from .errors import DuplicateCoord, IndexOutOfGrid, NotCropped, ShapeMismatch
from .grid import GridSpec, voxel_indices

POINT_DIMS = 10


@dataclass(eq=False)
class PillarTensor:
    """Fixed-size pillar input.

    Attributes:
        data: ``(P, N, 10)`` rows ``(x, y, z, r, dxc, dyc, dzc, dxp, dyp, dzp)``;
            rows past ``valid_points[p]`` are zero.
        coords: ``(P, 2)`` cell index per pillar, ``(-1, -1)`` for padding.
        valid_points: ``(P,)`` retained point count per pillar.
        valid_pillars: number of non-padding pillars (always the first ones).
    """

    data: np.ndarray
    coords: np.ndarray
    valid_points: np.ndarray
    valid_pillars: int

    @property
    def P(self) -> int:
        return self.data.shape[0]

    @property
    def N(self) -> int:
        return self.data.shape[1]

    @property
    def mask(self) -> np.ndarray:
        """``(P, N)`` boolean mask of real point rows."""
        return np.arange(self.N)[None, :] < self.valid_points[:, None]


def build_pillars(
    cloud: PointCloud,
    spec: GridSpec,
    P: int,
    N: int,
    rng: np.random.Generator,
    z_center: Optional[float] = None,
) -> PillarTensor:
    """Group a cropped cloud into at most ``P`` pillars of at most ``N`` points.

    Pillars come out in lexicographic ``(i, j)`` order. Overfull pillars keep
    a uniform random subset of ``N`` points (original order preserved); with
    more than ``P`` occupied cells a uniform random subset of ``P`` pillars
    is kept. The mean offsets use the retained points only, and the pillar
    centre's z is ``z_center`` (the crop midpoint by default).
    """
    if P < 1 or N < 1:
        raise ValueError("P and N must be positive")
    z_center = spec.z_mid if z_center is None else float(z_center)
    pts = cloud.points
    idx, inside = voxel_indices(pts[:, :3], spec)
    if not inside.all():
        raise NotCropped(f"{int((~inside).sum())} points lie outside the grid; crop first")

    data = np.zeros((P, N, POINT_DIMS))
    coords = np.full((P, 2), -1, dtype=np.int64)
    counts_out = np.zeros(P, dtype=np.int64)
    if len(pts) == 0:
        return PillarTensor(data, coords, counts_out, 0)

    lin = idx[:, 0] * spec.H + idx[:, 1]
    order = np.argsort(lin, kind="stable")
    cells, starts, counts = np.unique(lin[order], return_index=True, return_counts=True)

    n_pillars = len(cells)
    chosen = np.arange(n_pillars)
    if n_pillars > P:
        chosen = np.sort(rng.choice(n_pillars, size=P, replace=False))

    nv = len(chosen)
    pillar_of = np.repeat(np.arange(n_pillars), counts)
    slot_of = np.full(n_pillars, -1, dtype=np.int64)
    slot_of[chosen] = np.arange(nv)
    keep = slot_of[pillar_of] >= 0
    for c in chosen[counts[chosen] > N]:
        s0 = starts[c]
        keep[s0 : s0 + counts[c]] = False
        keep[s0 + np.sort(rng.choice(counts[c], size=N, replace=False))] = True
    point_idx = order[keep]
    slot = slot_of[pillar_of[keep]]
    counts_out[:nv] = np.bincount(slot, minlength=nv)
    row = np.arange(len(slot)) - np.repeat(np.cumsum(counts_out[:nv]) - counts_out[:nv], counts_out[:nv])

    sel = pts[point_idx]
    xyz = sel[:, :3]
    mean = np.stack([np.bincount(slot, weights=xyz[:, a], minlength=nv) for a in range(3)], axis=1)
    mean /= counts_out[:nv, None]
    cell_ij = idx[point_idx, :2]
    centre = np.empty((len(slot), 3))
    centre[:, 0] = spec.x_range[0] + (cell_ij[:, 0] + 0.5) * spec.cell_xy
    centre[:, 1] = spec.y_range[0] + (cell_ij[:, 1] + 0.5) * spec.cell_xy
    centre[:, 2] = z_center

    feats = np.concatenate([sel, xyz - mean[slot], xyz - centre], axis=1)
    data[slot, row] = feats
    coords[:nv, 0] = cells[chosen] // spec.H
    coords[:nv, 1] = cells[chosen] % spec.H
    return PillarTensor(data, coords, counts_out, nv)


@dataclass(eq=False)
class PointNetParams:
    """Linear ``D -> C`` followed by BatchNorm."""

    weight: Tensor
    bias: Tensor
    gamma: Tensor
    beta: Tensor
    bn: BatchNormState

    @property
    def channels(self) -> int:
        return self.weight.shape[1]


def pointnet_features(data: np.ndarray, mask: np.ndarray, params: PointNetParams, train: bool = False) -> Tensor:
    """Per-pillar features for ``data`` of shape ``(..., P, N, D)``.

    ReLU(BatchNorm(linear)) per point, then a max over the point axis that
    ignores padding rows. Batch statistics use the valid rows only.
    """
    if data.shape[-1] != params.weight.shape[0]:
        raise ShapeMismatch(f"pillar rows have {data.shape[-1]} dims, PointNet expects {params.weight.shape[0]}")
    h = linear(Tensor(data, copy=False), params.weight, params.bias)
    h = batchnorm(h, params.gamma, params.beta, params.bn, train=train, mask=mask)
    h = relu(h)
    return max_over_axis(h, axis=-2, mask=mask[..., None])


def pointnet_pillar_features(pillars: PillarTensor, params: PointNetParams, train: bool = False) -> Tensor:
    """``(P, C)`` pillar features; pillars without points give zeros."""
    return pointnet_features(pillars.data, pillars.mask, params, train)


def _check_coords(coords: np.ndarray, spec: GridSpec) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.int64)
    valid = coords[:, 0] >= 0
    c = coords[valid]
    if ((c[:, 0] >= spec.W) | (c[:, 1] < 0) | (c[:, 1] >= spec.H)).any():
        raise IndexOutOfGrid("pillar coordinate outside the grid")
    lin = c[:, 0] * spec.H + c[:, 1]
    if len(np.unique(lin)) != len(lin):
        raise DuplicateCoord("two pillars share a grid cell")
    return valid


def scatter(features: Tensor, coords: np.ndarray, spec: GridSpec) -> Tensor:
    """Place pillar features into a zero ``(W, H, C)`` pseudo image; sentinel rows are skipped."""
    if features.shape[0] != len(coords):
        raise ShapeMismatch(f"{features.shape[0]} feature rows for {len(coords)} coordinates")
    valid = _check_coords(coords, spec)
    rows = np.flatnonzero(valid)
    sel = take_rows(features, rows)
    c = np.asarray(coords)[rows]
    return place(sel, (c[:, 0], c[:, 1]), (spec.W, spec.H, features.shape[-1]))


def scatter_batch(features: Tensor, coords: Sequence[np.ndarray], spec: GridSpec) -> Tensor:
    """Batched :func:`scatter`: ``(B, P, C)`` features to a ``(B, W, H, C)`` image."""
    B, P, C = features.shape
    b_idx, p_idx, i_idx, j_idx = [], [], [], []
    for b, cc in enumerate(coords):
        valid = _check_coords(cc, spec)
        rows = np.flatnonzero(valid)
        b_idx.append(np.full(len(rows), b))
        p_idx.append(rows)
        i_idx.append(np.asarray(cc)[rows, 0])
        j_idx.append(np.asarray(cc)[rows, 1])
    b_idx, p_idx = np.concatenate(b_idx).astype(np.int64), np.concatenate(p_idx).astype(np.int64)
    flat = take_rows(features.reshape((B * P, C)), b_idx * P + p_idx)
    return place(flat, (b_idx, np.concatenate(i_idx).astype(np.int64), np.concatenate(j_idx).astype(np.int64)), (B, spec.W, spec.H, C))

