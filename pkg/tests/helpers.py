"""Shared fixtures-in-code for the test suite."""

from __future__ import annotations

import numpy as np

from pillarseg.dataset_io import LabelSet, PointCloud
from pillarseg.grid import GridSpec
from pillarseg.model import ModelConfig
from pillarseg.synthetic import TOY_FAN, render_scan, street_scene
from pillarseg.trainer import TrainSample

# 64 x 32 cells of 0.2 m, 20 height slices
TOY_GRID = GridSpec((-6.4, 6.4), (-3.2, 3.2), (-2.5, 1.5), 0.2, 0.2)
TINY_GRID = GridSpec((-1.6, 1.6), (-0.8, 0.8), (-2.5, 1.5), 0.2, 0.2)


def toy_model(mode: str = "none", **kw) -> ModelConfig:
    base = dict(grid=TOY_GRID, C=8, Q=4, occupancy_mode=mode, unet_depth=2, base_channels=4, P=1024, N=20)
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(mode: str = "none", **kw) -> ModelConfig:
    base = dict(grid=TINY_GRID, C=3, Q=2, occupancy_mode=mode, unet_depth=2, base_channels=2, P=64, N=8)
    base.update(kw)
    return ModelConfig(**base)


def street_samples(n: int = 4, offset: int = 0) -> list[TrainSample]:
    out = []
    for s in range(n):
        cloud, labels = render_scan(street_scene(s + offset, **TOY_FAN))
        out.append(TrainSample(cloud, labels))
    return out


def random_cloud(rng: np.random.Generator, n: int, spec: GridSpec, margin: float = 1.0, classes: int = 12):
    lo = spec.lower - margin
    hi = spec.upper + margin
    xyz = rng.uniform(lo, hi, (n, 3))
    r = rng.uniform(0, 1, (n, 1))
    cls = rng.integers(0, classes, n).astype(np.uint8)
    cls[rng.random(n) < 0.05] = 255
    return PointCloud(np.hstack([xyz, r])), LabelSet(cls, np.zeros(n, dtype=bool))
