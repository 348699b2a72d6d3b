"""Ray casting on the top-view grid and the voxel grid.

Rays are traversed in grid units with the Amanatides-Woo scheme: after
clipping the segment to the grid box, the ray steps across whichever cell
boundary it reaches next; on exact ties the lower axis (x, then y, then z)
steps first.

Two implementations share the same floating-point expressions: the scalar
:func:`traverse_2d` / :func:`traverse_3d`, and :func:`batch_traverse`, which
processes many rays at once with numpy and backs the map builders.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset_io import PointCloud
from .errors import DegenerateRay
from .grid import GridSpec

PRIOR = 0.5
_CHUNK_EVENTS = 1 << 21


@dataclass(eq=False)
class ObservabilityMap:
    """Per-cell ray transmission and endpoint hit counts, both ``(W, H)``."""

    transmissions: np.ndarray
    hits: np.ndarray
    skipped: int = 0

    def __add__(self, other: "ObservabilityMap") -> "ObservabilityMap":
        return ObservabilityMap(self.transmissions + other.transmissions, self.hits + other.hits, self.skipped + other.skipped)


@dataclass(eq=False)
class VoxelOccupancy:
    """Occupancy probability per voxel, ``(W, H, Z)``; unobserved voxels hold 0.5."""

    probability: np.ndarray
    hits: np.ndarray
    misses: np.ndarray


@dataclass(eq=False)
class ObservedMask:
    observed: np.ndarray


def _to_units(p, spec: GridSpec, dims: int) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return (p[..., :dims] - spec.lower[:dims]) / spec.cell_sizes[:dims]


# --- scalar traversal ---------------------------------------------------------------

def _clip(u0, d, shape):
    t0, t1 = 0.0, 1.0
    for a, n in enumerate(shape):
        if d[a] == 0.0:
            if not (0.0 <= u0[a] < n):
                return None
            continue
        ta = (0.0 - u0[a]) / d[a]
        tb = (n - u0[a]) / d[a]
        t0 = max(t0, min(ta, tb))
        t1 = min(t1, max(ta, tb))
    if not t0 < t1:
        return None
    return t0, t1


def _start_cell(u0, d, t0, shape):
    cell = []
    for a, n in enumerate(shape):
        ua = u0[a] if t0 == 0.0 else u0[a] + t0 * d[a]
        c = math.floor(ua)
        if d[a] < 0.0 and ua == c:
            c -= 1
        cell.append(min(max(c, 0), n - 1))
    return cell


def _next_boundary_t(c, u0, d):
    if d > 0.0:
        return ((c + 1) - u0) / d
    if d < 0.0:
        return (c - u0) / d
    return math.inf


def _traverse_units(u0, u1, shape) -> list[tuple[int, ...]]:
    u0 = [float(v) for v in u0]
    u1 = [float(v) for v in u1]
    d = [b - a for a, b in zip(u0, u1)]
    clipped = _clip(u0, d, shape)
    if clipped is None:
        return []
    t0, t1 = clipped
    cell = _start_cell(u0, d, t0, shape)
    tmax = [_next_boundary_t(cell[a], u0[a], d[a]) for a in range(len(shape))]
    out = [tuple(cell)]
    while True:
        a = min(range(len(shape)), key=lambda ax: (tmax[ax], ax))
        if not tmax[a] < t1:
            break
        cell[a] += 1 if d[a] > 0 else -1
        if not 0 <= cell[a] < shape[a]:
            break
        out.append(tuple(cell))
        tmax[a] = _next_boundary_t(cell[a], u0[a], d[a])
    return out


def _end_cell(u1, shape):
    """Cell containing the endpoint (grid units), or None outside the grid."""
    if not all(0.0 <= u1[a] < n for a, n in enumerate(shape)):
        return None
    return tuple(min(int(math.floor(u1[a])), n - 1) for a, n in enumerate(shape))


def traverse_2d(origin, endpoint, spec: GridSpec) -> list[tuple[int, int]]:
    """Top-view cells crossed by the segment, in order, without the endpoint's cell."""
    u0 = _to_units(origin, spec, 2)
    u1 = _to_units(endpoint, spec, 2)
    if np.array_equal(np.asarray(origin)[:2], np.asarray(endpoint)[:2]):
        raise DegenerateRay("origin and endpoint coincide")
    cells = _traverse_units(u0, u1, spec.shape2d)
    end = _end_cell(u1, spec.shape2d)
    if cells and end is not None and cells[-1] == end:
        cells.pop()
    return cells


def traverse_3d(origin, endpoint, spec: GridSpec) -> list[tuple[int, int, int]]:
    """Voxels crossed by the segment, in order; the endpoint voxel (if inside) comes last."""
    u0 = _to_units(origin, spec, 3)
    u1 = _to_units(endpoint, spec, 3)
    if np.array_equal(np.asarray(origin)[:3], np.asarray(endpoint)[:3]):
        raise DegenerateRay("origin and endpoint coincide")
    cells = _traverse_units(u0, u1, spec.shape3d)
    end = _end_cell(u1, spec.shape3d)
    if end is not None and (not cells or cells[-1] != end):
        cells.append(end)
    return cells


# --- batched traversal ------------------------------------------------------------------

def _crossing_t(c, k, sign, u0, d):
    """Parameter of the k-th boundary crossing (k >= 1) from start cell c."""
    boundary = np.where(sign > 0, c + k, c - k + 1).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        return (boundary - u0) / d


def _count_before(c, sign, u0, d, t, limit, inclusive):
    """Number of crossings ``k`` in ``[1, limit]`` with ``t_k < t`` (``<=`` if inclusive).

    Crossing parameters are monotone in ``k``, so an estimate followed by an
    exact fix-up gives the same answer as a full scan.
    """
    def before(k):
        tk = _crossing_t(c, k, sign, u0, d)
        return tk <= t if inclusive else tk < t

    with np.errstate(divide="ignore", invalid="ignore"):
        est = np.where(sign != 0, np.abs(u0 + t * d - (c + (sign > 0))) + 1, 0)
    est = np.where(np.isfinite(est), est, 0)
    k = np.clip(np.floor(est).astype(np.int64), 0, limit)
    for _ in range(64):
        up = (k < limit) & before(k + 1)
        down = (k > 0) & ~before(k)
        if not (up.any() or down.any()):
            break
        k = k + up - down
    return k


def _count_crossings(c, sign, u0, d, t1, n):
    """Number of boundaries crossed strictly before ``t1`` (and inside the grid)."""
    limit = np.where(sign > 0, n - 1 - c, c)
    limit = np.where(sign == 0, 0, limit)
    return _count_before(c, sign, u0, d, t1, limit, inclusive=False)


def batch_traverse(u0: np.ndarray, u1: np.ndarray, shape: tuple[int, ...]):
    """Traverse many rays given in grid units.

    Args:
        u0, u1: ``(R, D)`` ray start and end points in grid units.
        shape: grid size per axis.

    Returns:
        ``(ray, cells, start, length)``: ``cells[start[r] : start[r] + length[r]]``
        is the scalar traversal of ray ``r`` and ``ray`` gives the owning ray of
        every row of ``cells``.
    """
    u0 = np.asarray(u0, dtype=np.float64)
    u1 = np.asarray(u1, dtype=np.float64)
    R, D = u0.shape
    n = np.asarray(shape, dtype=np.int64)
    d = u1 - u0

    t0 = np.zeros(R)
    t1 = np.ones(R)
    ok = np.ones(R, dtype=bool)
    with np.errstate(divide="ignore", invalid="ignore"):
        for a in range(D):
            flat = d[:, a] == 0.0
            ok &= ~(flat & ~((u0[:, a] >= 0.0) & (u0[:, a] < n[a])))
            ta = (0.0 - u0[:, a]) / d[:, a]
            tb = (n[a] - u0[:, a]) / d[:, a]
            t0 = np.where(flat, t0, np.maximum(t0, np.minimum(ta, tb)))
            t1 = np.where(flat, t1, np.minimum(t1, np.maximum(ta, tb)))
    ok &= t0 < t1

    ua = np.where((t0 == 0.0)[:, None], u0, u0 + t0[:, None] * d)
    c = np.floor(ua)
    c -= (d < 0.0) & (ua == c)
    c = np.clip(c, 0, n - 1).astype(np.int64)
    sign = np.sign(d).astype(np.int64)

    counts = np.zeros((R, D), dtype=np.int64)
    for a in range(D):
        counts[:, a] = _count_crossings(c[:, a], sign[:, a], u0[:, a], d[:, a], t1, n[a])
    counts[~ok] = 0
    length = np.where(ok, 1 + counts.sum(axis=1), 0)
    start = np.concatenate([[0], np.cumsum(length)[:-1]]).astype(np.int64)
    total = int(length.sum())

    cells = np.zeros((total, D), dtype=np.int64)
    ray = np.repeat(np.arange(R), length)
    cells[start[ok]] = c[ok]
    # Each boundary-crossing event lands at its merge rank within the ray:
    # its own rank on its axis plus the earlier events on the other axes
    # (ties go to the lower axis first).
    for a in range(D):
        cnt = counts[:, a]
        rr = np.repeat(np.arange(R), cnt)
        if rr.size == 0:
            continue
        k = np.arange(rr.size) - np.repeat(np.cumsum(cnt) - cnt, cnt) + 1
        t = _crossing_t(c[rr, a], k, sign[rr, a], u0[rr, a], d[rr, a])
        pos = k.copy()
        ev = np.empty((rr.size, D), dtype=np.int64)
        ev[:, a] = c[rr, a] + sign[rr, a] * k
        for b in range(D):
            if b == a:
                continue
            m = _count_before(c[rr, b], sign[rr, b], u0[rr, b], d[rr, b], t, counts[rr, b], inclusive=b < a)
            pos += m
            ev[:, b] = c[rr, b] + sign[rr, b] * m
        cells[start[rr] + pos] = ev
    return ray, cells, start, length


def _end_cells(u1: np.ndarray, shape) -> tuple[np.ndarray, np.ndarray]:
    n = np.asarray(shape)
    inside = np.all((u1 >= 0.0) & (u1 < n), axis=1)
    idx = np.minimum(np.floor(np.where(np.isfinite(u1), u1, 0)).astype(np.int64), n - 1)
    return idx, inside


def _ray_chunks(n_rays: int, approx_len: float):
    per = max(1, int(_CHUNK_EVENTS / max(approx_len, 1.0)))
    for s in range(0, n_rays, per):
        yield slice(s, min(n_rays, s + per))


def _cast(u0: np.ndarray, u1: np.ndarray, shape):
    """Accumulate pass-through counts and endpoint hits for rays from ``u0``."""
    misses = np.zeros(int(np.prod(shape)), dtype=np.int64)
    hits = np.zeros_like(misses)
    if len(u1) == 0:
        return misses.reshape(shape), hits.reshape(shape)
    strides = np.array([int(np.prod(shape[a + 1 :])) for a in range(len(shape))], dtype=np.int64)
    approx = float(np.abs(u1 - u0).sum(axis=1).mean()) + 1.0
    for sl in _ray_chunks(len(u1), approx):
        a, b = u0[sl], u1[sl]
        ray, cells, start, length = batch_traverse(a, b, shape)
        end, inside = _end_cells(b, shape)
        lin = cells @ strides
        drop = np.zeros(len(lin), dtype=bool)
        last = start + length - 1
        has = length > 0
        at_end = has & inside
        at_end[has] &= np.all(cells[last[has]] == end[has], axis=1)
        drop[last[at_end]] = True
        misses += np.bincount(lin[~drop], minlength=misses.size)
        hits += np.bincount(end[inside] @ strides, minlength=hits.size)
    return misses.reshape(shape), hits.reshape(shape)


def observability_map(cloud: PointCloud, sensor_origin, spec: GridSpec) -> ObservabilityMap:
    """Count 2D ray transmissions per cell and endpoint hits.

    Each point casts a ray from the sensor origin projected onto the ground
    plane; rays leaving the grid are clipped and contribute transmissions
    only. Rays whose projection has zero length are skipped.
    """
    origin = np.asarray(sensor_origin, dtype=np.float64)
    xy = cloud.xyz[:, :2]
    degenerate = np.all(xy == origin[:2], axis=1)
    u1 = _to_units(xy[~degenerate], spec, 2)
    u0 = np.broadcast_to(_to_units(origin, spec, 2), u1.shape)
    trans, hits = _cast(u0, u1, spec.shape2d)
    return ObservabilityMap(trans, hits, int(degenerate.sum()))


def voxel_occupancy(cloud: PointCloud, sensor_origin, spec: GridSpec) -> VoxelOccupancy:
    """Hit-ratio inverse sensor model: ``h / (h + m)`` per voxel, 0.5 where unobserved."""
    origin = np.asarray(sensor_origin, dtype=np.float64)
    xyz = cloud.xyz
    degenerate = np.all(xyz == origin[:3], axis=1)
    u1 = _to_units(xyz[~degenerate], spec, 3)
    u0 = np.broadcast_to(_to_units(origin, spec, 3), u1.shape)
    misses, hits = _cast(u0, u1, spec.shape3d)
    total = hits + misses
    prob = np.full(spec.shape3d, PRIOR)
    seen = total > 0
    prob[seen] = hits[seen] / total[seen]
    return VoxelOccupancy(prob, hits, misses)


def observed_mask(obs: ObservabilityMap) -> ObservedMask:
    return ObservedMask((obs.transmissions >= 1) | (obs.hits >= 1))
