"""Pillar segmentation network: PointNet pillar stream, optional occupancy
stream, a U-Net without its input block, and a 1x1 segmentation head."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dataset_io import NUM_CLASSES, PointCloud
from .engine import (
    BatchNormState,
    Tensor,
    batchnorm,
    concat_channels,
    conv2d,
    crop_spatial,
    maxpool2,
    no_grad,
    pad_spatial,
    relu,
    softmax_channels,
    upsample2,
)
from .errors import DivisibilityError, ModeMismatch, ShapeMismatch
from .grid import GridSpec, crop_cloud, default_spec
from .groundtruth import SemanticGrid
from .occupancy import ObservabilityMap, VoxelOccupancy, observability_map, voxel_occupancy
from .pillars import POINT_DIMS, PillarTensor, PointNetParams, build_pillars, pointnet_features, scatter_batch

OCCUPANCY_MODES = ("none", "2d", "3d")


@dataclass(frozen=True)
class ModelConfig:
    """Network hyperparameters.

    ``pad`` zero-pads grids whose sides are not multiples of
    ``2 ** unet_depth`` and crops the logits back; with ``pad=False`` such
    grids raise :class:`DivisibilityError`.
    """

    grid: GridSpec = field(default_factory=default_spec)
    C: int = 64
    Q: int = 16
    occupancy_mode: str = "none"
    unet_depth: int = 4
    base_channels: int = 16
    K: int = NUM_CLASSES
    P: int = 30000
    N: int = 20
    pad: bool = True
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.occupancy_mode not in OCCUPANCY_MODES:
            raise ValueError(f"occupancy_mode must be one of {OCCUPANCY_MODES}, got {self.occupancy_mode!r}")
        for name in ("C", "unet_depth", "base_channels", "K", "P", "N"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.occupancy_mode != "none" and self.Q < 1:
            raise ValueError("Q must be positive when the occupancy stream is active")
        if not self.pad:
            m = 2**self.unet_depth
            if self.grid.W % m or self.grid.H % m:
                raise DivisibilityError(
                    f"grid {self.grid.W}x{self.grid.H} is not divisible by 2^{self.unet_depth}; enable padding"
                )

    @property
    def occ_channels(self) -> int:
        return 0 if self.occupancy_mode == "none" else self.Q

    @property
    def occ_input_channels(self) -> int:
        return {"none": 0, "2d": 1, "3d": self.grid.Z}[self.occupancy_mode]

    @property
    def in_channels(self) -> int:
        return self.C + self.occ_channels

    def padded_shape(self) -> tuple[int, int]:
        m = 2**self.unet_depth
        return (-(-self.grid.W // m) * m, -(-self.grid.H // m) * m)

    def padding(self) -> tuple[tuple[int, int], tuple[int, int]]:
        """Symmetric zero padding ``((left, right), (bottom, top))`` for the U-Net."""
        pw, ph = self.padded_shape()
        dw, dh = pw - self.grid.W, ph - self.grid.H
        if (dw or dh) and not self.pad:
            raise DivisibilityError(f"grid {self.grid.W}x{self.grid.H} is not divisible by 2^{self.unet_depth}")
        return (dw // 2, dw - dw // 2), (dh // 2, dh - dh // 2)


@dataclass(eq=False)
class NetworkParams:
    """Trainable tensors and batch-norm running statistics, keyed by name."""

    tensors: dict[str, Tensor]
    bn: dict[str, BatchNormState]

    def census(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(k, t.shape) for k, t in self.tensors.items()]

    def conv_layers(self) -> list[str]:
        """Convolution layer names in construction order."""
        return [k[: -len(".kernel")] for k in self.tensors if k.endswith(".kernel")]

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def pointnet(self) -> PointNetParams:
        t = self.tensors
        return PointNetParams(t["pointnet.weight"], t["pointnet.bias"], t["pointnet.gamma"], t["pointnet.beta"], self.bn["pointnet"])

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": t.data for k, t in self.tensors.items()}
        for k, s in self.bn.items():
            out[f"bn/{k}/mean"] = s.running_mean
            out[f"bn/{k}/var"] = s.running_var
        return out

    def load_state_dict(self, records: dict[str, np.ndarray]) -> None:
        expected = set(self.state_dict())
        missing = expected - set(records)
        if missing:
            raise ShapeMismatch(f"checkpoint lacks {sorted(missing)[:3]}")
        for k, t in self.tensors.items():
            arr = records[f"param/{k}"]
            if arr.shape != t.shape:
                raise ShapeMismatch(f"{k}: checkpoint shape {arr.shape}, model {t.shape}")
            t.data[...] = arr
        for k, s in self.bn.items():
            for attr, suffix in (("running_mean", "mean"), ("running_var", "var")):
                arr = records[f"bn/{k}/{suffix}"]
                if arr.shape != getattr(s, attr).shape:
                    raise ShapeMismatch(f"bn {k}: checkpoint shape {arr.shape}")
                getattr(s, attr)[...] = arr


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


class _Builder:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.tensors: dict[str, Tensor] = {}
        self.bn: dict[str, BatchNormState] = {}

    def conv(self, name: str, k: int, cin: int, cout: int) -> None:
        a = xavier_bound(k * k * cin, k * k * cout)
        self.tensors[f"{name}.kernel"] = Tensor(self.rng.uniform(-a, a, (k, k, cin, cout)), requires_grad=True)
        self.tensors[f"{name}.bias"] = Tensor(np.zeros(cout), requires_grad=True)

    def norm(self, name: str, c: int) -> None:
        self.tensors[f"{name}.gamma"] = Tensor(np.ones(c), requires_grad=True)
        self.tensors[f"{name}.beta"] = Tensor(np.zeros(c), requires_grad=True)
        self.bn[name] = BatchNormState.fresh(c)

    def double_conv(self, name: str, cin: int, cout: int) -> None:
        self.conv(f"{name}.conv1", 3, cin, cout)
        self.conv(f"{name}.conv2", 3, cout, cout)


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> NetworkParams:
    """Xavier-uniform weights, zero biases, unit BatchNorm scales."""
    b = _Builder(rng)
    a = xavier_bound(POINT_DIMS, cfg.C)
    b.tensors["pointnet.weight"] = Tensor(rng.uniform(-a, a, (POINT_DIMS, cfg.C)), requires_grad=True)
    b.tensors["pointnet.bias"] = Tensor(np.zeros(cfg.C), requires_grad=True)
    b.norm("pointnet", cfg.C)
    if cfg.occupancy_mode != "none":
        b.conv("occ", 3, cfg.occ_input_channels, cfg.Q)
        b.norm("occ", cfg.Q)
    width = [cfg.base_channels * 2**level for level in range(cfg.unet_depth + 1)]
    cin = cfg.in_channels
    for level in range(cfg.unet_depth):
        b.double_conv(f"enc{level}", cin, width[level])
        cin = width[level]
    b.double_conv("bottleneck", cin, width[-1])
    for level in reversed(range(cfg.unet_depth)):
        b.conv(f"dec{level}.up", 3, width[level + 1], width[level])
        b.double_conv(f"dec{level}", 2 * width[level], width[level])
    b.conv("head", 1, width[0], cfg.K)
    return NetworkParams(b.tensors, b.bn)


@dataclass(eq=False)
class ModelInput:
    """One scan prepared for the network."""

    pillars: PillarTensor
    occupancy: Optional[np.ndarray] = None  # (W, H, 1) or (W, H, Z)


def occupancy_input(cloud: PointCloud, cfg: ModelConfig, origin=(0.0, 0.0, 0.0)) -> Optional[np.ndarray]:
    """Occupancy stream input: the transmission map (2d) or the probability volume (3d)."""
    if cfg.occupancy_mode == "2d":
        return observability_map(cloud, origin, cfg.grid).transmissions[..., None].astype(np.float64)
    if cfg.occupancy_mode == "3d":
        return voxel_occupancy(cloud, origin, cfg.grid).probability
    return None


def prepare_input(
    cloud: PointCloud, cfg: ModelConfig, rng: np.random.Generator, origin=(0.0, 0.0, 0.0)
) -> ModelInput:
    """Crop, group into pillars and (when enabled) ray-cast the full cloud.

    Ray casting uses every point, including those beyond the crop box.
    """
    occ = occupancy_input(cloud, cfg, origin)
    cropped, _ = crop_cloud(cloud, None, cfg.grid)
    return ModelInput(build_pillars(cropped, cfg.grid, cfg.P, cfg.N, rng), occ)


def _conv_bn_relu(x: Tensor, params: NetworkParams, conv: str, norm: str, train: bool, momentum: float) -> Tensor:
    t = params.tensors
    y = conv2d(x, t[f"{conv}.kernel"], t[f"{conv}.bias"])
    y = batchnorm(y, t[f"{norm}.gamma"], t[f"{norm}.beta"], params.bn[norm], train=train, momentum=momentum)
    return relu(y)


def _double_conv(x: Tensor, params: NetworkParams, name: str) -> Tensor:
    t = params.tensors
    x = relu(conv2d(x, t[f"{name}.conv1.kernel"], t[f"{name}.conv1.bias"]))
    return relu(conv2d(x, t[f"{name}.conv2.kernel"], t[f"{name}.conv2.bias"]))


def occupancy_features(occ, params: NetworkParams, cfg: ModelConfig, train: bool = False) -> Tensor:
    """``ReLU(BatchNorm(conv3x3(occupancy)))`` for a ``(..., W, H, 1 or Z)`` input.

    Accepts an :class:`ObservabilityMap` (2d mode), a :class:`VoxelOccupancy`
    (3d mode) or a prepared array.
    """
    if cfg.occupancy_mode == "none":
        raise ModeMismatch("occupancy stream is disabled in this model")
    if isinstance(occ, ObservabilityMap):
        if cfg.occupancy_mode != "2d":
            raise ModeMismatch("observability map given to a 3d occupancy model")
        occ = occ.transmissions[..., None].astype(np.float64)
    elif isinstance(occ, VoxelOccupancy):
        if cfg.occupancy_mode != "3d":
            raise ModeMismatch("voxel occupancy given to a 2d occupancy model")
        occ = occ.probability
    occ = np.asarray(occ, dtype=np.float64)
    if occ.shape[-1] != cfg.occ_input_channels or occ.shape[-3:-1] != cfg.grid.shape2d:
        raise ModeMismatch(
            f"occupancy input {occ.shape} does not fit mode {cfg.occupancy_mode} on a {cfg.grid.W}x{cfg.grid.H} grid"
        )
    return _conv_bn_relu(Tensor(occ, copy=False), params, "occ", "occ", train, cfg.bn_momentum)


def unet(x: Tensor, params: NetworkParams, cfg: ModelConfig) -> Tensor:
    """Logits ``(..., W, H, K)`` from the ``(..., W, H, C+Q)`` aggregate.

    Levels are double 3x3 conv + ReLU blocks; the first one runs directly on
    the aggregate, without a separate input block.
    """
    (pl, pr), (pb, pt) = cfg.padding()
    W, H = x.shape[-3], x.shape[-2]
    padded = bool(pl or pr or pb or pt)
    if padded:
        x = pad_spatial(x, (pl, pr), (pb, pt))
    skips = []
    for level in range(cfg.unet_depth):
        x = _double_conv(x, params, f"enc{level}")
        skips.append(x)
        x = maxpool2(x)
    x = _double_conv(x, params, "bottleneck")
    t = params.tensors
    for level in reversed(range(cfg.unet_depth)):
        x = upsample2(x)
        x = conv2d(x, t[f"dec{level}.up.kernel"], t[f"dec{level}.up.bias"])
        x = concat_channels(skips[level], x)
        x = _double_conv(x, params, f"dec{level}")
    x = conv2d(x, t["head.kernel"], t["head.bias"])
    if padded:
        x = crop_spatial(x, (pl, pb), (W, H))
    return x


def forward_batch(inputs: Sequence[ModelInput], cfg: ModelConfig, params: NetworkParams, train: bool = False) -> Tensor:
    """Logits ``(B, W, H, K)``; batch-norm statistics span the whole batch."""
    if not inputs:
        raise ShapeMismatch("empty batch")
    for inp in inputs:
        if inp.pillars.data.shape[:2] != (cfg.P, cfg.N):
            raise ShapeMismatch(f"pillar tensor {inp.pillars.data.shape[:2]} does not match P={cfg.P}, N={cfg.N}")
    data = np.stack([inp.pillars.data for inp in inputs])
    mask = np.stack([inp.pillars.mask for inp in inputs])
    feats = pointnet_features(data, mask, params.pointnet(), train)
    x = scatter_batch(feats, [inp.pillars.coords for inp in inputs], cfg.grid)
    if cfg.occupancy_mode != "none":
        if any(inp.occupancy is None for inp in inputs):
            raise ModeMismatch("occupancy stream enabled but an input carries no occupancy map")
        occ = np.stack([inp.occupancy for inp in inputs])
        x = concat_channels(x, occupancy_features(occ, params, cfg, train))
    elif any(inp.occupancy is not None for inp in inputs):
        raise ModeMismatch("occupancy map given to a model without occupancy stream")
    return unet(x, params, cfg)


def forward(
    cloud: PointCloud,
    cfg: ModelConfig,
    params: NetworkParams,
    rng: np.random.Generator,
    train: bool = False,
    origin=(0.0, 0.0, 0.0),
) -> Tensor:
    """Logits ``(W, H, K)`` for one scan."""
    logits = forward_batch([prepare_input(cloud, cfg, rng, origin)], cfg, params, train)
    return logits.reshape(logits.shape[1:])


def predict(logits) -> tuple[SemanticGrid, np.ndarray]:
    """Per-cell class (lowest id on ties) and softmax probabilities."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    with no_grad():
        probs = softmax_channels(Tensor(data, copy=False)).data
    return SemanticGrid(np.argmax(data, axis=-1).astype(np.uint8)), probs
