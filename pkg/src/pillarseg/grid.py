"""Top-view and voxel discretisation shared by all modules.

Cells are half-open: a coordinate ``x`` belongs to column
``floor((x - x_min) / cell_xy)`` and the upper crop bound is excluded.
Index ``i`` runs along x (grid width ``W``), ``j`` along y (height ``H``),
``k`` along z.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dataset_io import LabelSet, PointCloud, check_pair
from .errors import IndexOutOfGrid, InvalidGridSpec


def _cells(lo: float, hi: float, size: float, axis: str) -> int:
    if not lo < hi:
        raise InvalidGridSpec(f"{axis}: min {lo} must be below max {hi}")
    if not size > 0:
        raise InvalidGridSpec(f"{axis}: cell size must be positive, got {size}")
    n = (hi - lo) / size
    rounded = round(n)
    if abs(n - rounded) > 1e-9 or rounded < 1:
        raise InvalidGridSpec(f"{axis}: extent {hi - lo} is not a multiple of cell size {size}")
    return int(rounded)


@dataclass(frozen=True)
class GridSpec:
    x_range: tuple[float, float]
    y_range: tuple[float, float]
    z_range: tuple[float, float]
    cell_xy: float
    cell_z: float

    def __post_init__(self):
        for name in ("x_range", "y_range", "z_range"):
            lo, hi = getattr(self, name)
            object.__setattr__(self, name, (float(lo), float(hi)))
        object.__setattr__(self, "cell_xy", float(self.cell_xy))
        object.__setattr__(self, "cell_z", float(self.cell_z))
        # validates
        self.shape3d

    @property
    def W(self) -> int:
        return _cells(*self.x_range, self.cell_xy, "x")

    @property
    def H(self) -> int:
        return _cells(*self.y_range, self.cell_xy, "y")

    @property
    def Z(self) -> int:
        return _cells(*self.z_range, self.cell_z, "z")

    @property
    def shape2d(self) -> tuple[int, int]:
        return self.W, self.H

    @property
    def shape3d(self) -> tuple[int, int, int]:
        return self.W, self.H, self.Z

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.x_range[0], self.y_range[0], self.z_range[0]])

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.x_range[1], self.y_range[1], self.z_range[1]])

    @property
    def cell_sizes(self) -> np.ndarray:
        return np.array([self.cell_xy, self.cell_xy, self.cell_z])

    @property
    def z_mid(self) -> float:
        return 0.5 * (self.z_range[0] + self.z_range[1])

    def to_dict(self) -> dict[str, float]:
        return {
            "x_min": self.x_range[0],
            "x_max": self.x_range[1],
            "y_min": self.y_range[0],
            "y_max": self.y_range[1],
            "z_min": self.z_range[0],
            "z_max": self.z_range[1],
            "cell_xy": self.cell_xy,
            "cell_z": self.cell_z,
        }

    @classmethod
    def from_dict(cls, d) -> "GridSpec":
        try:
            return cls(
                (float(d["x_min"]), float(d["x_max"])),
                (float(d["y_min"]), float(d["y_max"])),
                (float(d["z_min"]), float(d["z_max"])),
                float(d["cell_xy"]),
                float(d["cell_z"]),
            )
        except KeyError as exc:
            raise InvalidGridSpec(f"missing grid key {exc.args[0]!r}") from None
        except ValueError as exc:
            raise InvalidGridSpec(str(exc)) from None


def default_spec() -> GridSpec:
    return GridSpec((-50.0, 50.0), (-25.0, 25.0), (-2.5, 1.5), 0.1, 0.2)


def voxel_indices(xyz: np.ndarray, spec: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`voxel_of`.

    Returns:
        ``(idx, inside)`` with ``idx`` an ``(n, 3)`` int64 array (meaningful
        only where ``inside``) and ``inside`` the half-open box test.
    """
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    lo, hi = spec.lower, spec.upper
    inside = np.all((xyz >= lo) & (xyz < hi), axis=1)
    idx = np.floor((xyz - lo) / spec.cell_sizes).astype(np.int64)
    # rounding can push a coordinate just below the upper bound onto index n
    np.minimum(idx, np.array(spec.shape3d) - 1, out=idx)
    np.maximum(idx, 0, out=idx)
    return idx, inside


def cell_indices(xyz: np.ndarray, spec: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    idx, inside = voxel_indices(xyz, spec)
    return idx[:, :2], inside


def voxel_of(p, spec: GridSpec) -> Optional[tuple[int, int, int]]:
    idx, inside = voxel_indices(np.asarray(p, dtype=np.float64)[:3], spec)
    if not inside[0]:
        return None
    return tuple(int(v) for v in idx[0])


def cell_of(p, spec: GridSpec) -> Optional[tuple[int, int]]:
    v = voxel_of(p, spec)
    return None if v is None else v[:2]


def center_of(i: int, j: int, spec: GridSpec) -> tuple[float, float]:
    if not (0 <= i < spec.W and 0 <= j < spec.H):
        raise IndexOutOfGrid(f"cell ({i}, {j}) outside grid {spec.W}x{spec.H}")
    return (spec.x_range[0] + (i + 0.5) * spec.cell_xy, spec.y_range[0] + (j + 0.5) * spec.cell_xy)


def crop_mask(cloud: PointCloud, spec: GridSpec) -> np.ndarray:
    return voxel_indices(cloud.xyz, spec)[1]


def crop_cloud(
    cloud: PointCloud, labels: Optional[LabelSet], spec: GridSpec
) -> tuple[PointCloud, Optional[LabelSet]]:
    """Keep the points inside the crop box, preserving order and label pairing."""
    check_pair(cloud, labels)
    keep = crop_mask(cloud, spec)
    out = PointCloud(cloud.points[keep], cloud.frame_id)
    return out, (None if labels is None else labels.subset(keep))

