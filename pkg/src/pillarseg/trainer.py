"""Weighted cross-entropy training with point-cloud augmentation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .dataset_io import NUM_CLASSES, PERSON, RIDER, TWO_WHEEL, VEHICLE, LabelSet, PointCloud, atomic_write_bytes
from .engine import (
    AdamState,
    Tensor,
    adam_step,
    backward,
    decode_checkpoint,
    encode_checkpoint,
    mean,
    stack,
    take_rows,
    weighted_cross_entropy,
)
from .errors import CheckpointFormatError, DivergedLoss, EmptyDataset, ShapeMismatch
from .groundtruth import SemanticGrid, default_gt_weights, sparse_gt
from .metrics import ConfusionMatrix, accumulate, miou
from .model import ModelConfig, NetworkParams, forward_batch, init_params, prepare_input

log = logging.getLogger(__name__)

TRAIN_MODES = ("sparse", "dense")


def default_loss_weights(mode: str = "sparse") -> np.ndarray:
    """Per-class cross-entropy weights; vehicles weigh more when training on dense ground truth."""
    if mode not in TRAIN_MODES:
        raise ValueError(f"mode must be one of {TRAIN_MODES}, got {mode!r}")
    w = np.ones(NUM_CLASSES)
    w[VEHICLE] = 2.0 if mode == "sparse" else 5.0
    w[[PERSON, TWO_WHEEL, RIDER]] = 8.0
    return w


def _check_loss_weights(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if not (np.all(np.isfinite(w)) and np.all(w > 0)):
        raise ValueError("loss weights must be finite and positive")
    return w


def weighted_ce_loss(logits: Tensor, target, weights) -> Tensor:
    """Mean weighted cross entropy over the labelled cells of ``(W, H, K)`` logits.

    Leading batch axes are allowed; the loss is then averaged over the batch.
    """
    t = np.asarray(getattr(target, "class_id", target))
    if t.shape != logits.shape[:-1]:
        raise ShapeMismatch(f"target {t.shape} does not match logits {logits.shape}")
    w = _check_loss_weights(weights)
    if logits.ndim == 3:
        return weighted_cross_entropy(logits, t, w)
    B = int(np.prod(logits.shape[:-3]))
    flat = logits.reshape((B,) + logits.shape[-3:])
    tt = t.reshape((B,) + t.shape[-2:])
    per = [weighted_cross_entropy(take_rows(flat, np.array([b])).reshape(flat.shape[1:]), tt[b], w) for b in range(B)]
    return mean(stack(per))


# --- augmentation ------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    flip: bool = True
    rotate: bool = True
    scale: bool = True
    translate: bool = True
    seed: int = 0
    flip_prob: float = 0.5
    max_angle: float = math.pi / 4
    scale_range: tuple[float, float] = (0.95, 1.05)
    translate_std: tuple[float, float, float] = (5.0, 5.0, 0.05)

    @classmethod
    def off(cls, seed: int = 0) -> "AugmentConfig":
        return cls(False, False, False, False, seed)


@dataclass(frozen=True)
class AugmentTransform:
    """``p -> s * R(theta) @ F p + delta`` with ``F`` the diagonal flip."""

    flip_x: bool = False
    flip_y: bool = False
    theta: Optional[float] = None
    scale: Optional[float] = None
    delta: Optional[tuple[float, float, float]] = None

    def apply_xyz(self, xyz: np.ndarray) -> np.ndarray:
        out = np.array(xyz, dtype=np.float64, copy=True)
        if self.flip_x:
            out[..., 0] = -out[..., 0]
        if self.flip_y:
            out[..., 1] = -out[..., 1]
        if self.theta is not None:
            c, s = math.cos(self.theta), math.sin(self.theta)
            x, y = out[..., 0].copy(), out[..., 1].copy()
            out[..., 0] = c * x - s * y
            out[..., 1] = s * x + c * y
        if self.scale is not None:
            out *= self.scale
        if self.delta is not None:
            out += np.asarray(self.delta)
        return out

    def apply(self, cloud: PointCloud) -> PointCloud:
        pts = cloud.points.copy()
        pts[:, :3] = self.apply_xyz(cloud.xyz)
        return PointCloud(pts, cloud.frame_id)


def sample_transform(cfg: AugmentConfig, rng: np.random.Generator) -> AugmentTransform:
    """Draw flip, rotation, scale and translation in that order; disabled steps draw nothing."""
    fx = fy = False
    if cfg.flip:
        fx, fy = (bool(v) for v in rng.random(2) < cfg.flip_prob)
    theta = float(rng.uniform(-cfg.max_angle, cfg.max_angle)) if cfg.rotate else None
    scale = float(rng.uniform(*cfg.scale_range)) if cfg.scale else None
    delta = tuple(float(v) for v in rng.normal(0.0, cfg.translate_std)) if cfg.translate else None
    return AugmentTransform(fx, fy, theta, scale, delta)


def augment(cloud: PointCloud, origin, cfg: AugmentConfig, rng: np.random.Generator) -> tuple[PointCloud, np.ndarray]:
    """Transform the cloud and the sensor origin with one random similarity transform."""
    tf = sample_transform(cfg, rng)
    return tf.apply(cloud), tf.apply_xyz(np.asarray(origin, dtype=np.float64))


# --- training loop ------------------------------------------------------------------

@dataclass(eq=False)
class TrainSample:
    """A labelled scan in its own sensor frame.

    ``gt_cloud`` / ``gt_labels`` (dense mode) hold the aggregated labelled
    points that the target grid is rasterised from; sparse mode uses the
    scan itself.
    """

    cloud: PointCloud
    labels: LabelSet
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    gt_cloud: Optional[PointCloud] = None
    gt_labels: Optional[LabelSet] = None


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "sparse"
    epochs: int = 30
    batch_size: int = 2
    lr: float = 1e-3
    weight_decay: float = 0.01
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    loss_weights: Optional[tuple[float, ...]] = None
    gt_weights: Optional[tuple[float, ...]] = None
    seed: int = 0
    max_steps: Optional[int] = None
    shuffle: bool = True

    def __post_init__(self):
        if self.mode not in TRAIN_MODES:
            raise ValueError(f"mode must be one of {TRAIN_MODES}, got {self.mode!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not (self.lr >= 0 and self.weight_decay >= 0):
            raise ValueError("lr and weight_decay must be nonnegative")

    def resolved_loss_weights(self) -> np.ndarray:
        if self.loss_weights is None:
            return default_loss_weights(self.mode)
        return _check_loss_weights(self.loss_weights)

    def resolved_gt_weights(self) -> np.ndarray:
        return default_gt_weights() if self.gt_weights is None else np.asarray(self.gt_weights, dtype=np.float64)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    miou: float
    steps: int


def format_metrics_log(records: Sequence[EpochRecord]) -> str:
    lines = ["epoch\tloss\tmiou"]
    lines += [f"{r.epoch}\t{r.loss!r}\t{r.miou!r}" for r in records]
    return "\n".join(lines) + "\n"


def target_for(sample: TrainSample, tf: AugmentTransform, cfg: TrainConfig, model_cfg: ModelConfig) -> SemanticGrid:
    """Ground-truth grid rasterised from the augmented labelled points."""
    if cfg.mode == "dense":
        if sample.gt_cloud is None or sample.gt_labels is None:
            raise ValueError("dense training needs aggregated ground-truth points for every sample")
        src, lab = sample.gt_cloud, sample.gt_labels
    else:
        src, lab = sample.cloud, sample.labels
    return sparse_gt(tf.apply(src), lab, model_cfg.grid, cfg.resolved_gt_weights())


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def save_checkpoint(path, params: NetworkParams, adam: Optional[AdamState] = None, epoch: int = 0) -> None:
    records = dict(params.state_dict())
    records["meta/epoch"] = np.array([float(epoch)])
    if adam is not None:
        records["meta/adam_step"] = np.array([float(adam.step)])
        for k in params.tensors:
            if k in adam.m:
                records[f"adam/m/{k}"] = adam.m[k]
                records[f"adam/v/{k}"] = adam.v[k]
    atomic_write_bytes(path, encode_checkpoint(records))


def load_checkpoint(path, params: NetworkParams) -> tuple[Optional[AdamState], int]:
    """Load weights into ``params``; returns the optimizer state (if stored) and the epoch."""
    records = decode_checkpoint(Path(path).read_bytes())
    params.load_state_dict(records)
    epoch = int(records["meta/epoch"][0]) if "meta/epoch" in records else 0
    if "meta/adam_step" not in records:
        return None, epoch
    adam = AdamState(int(records["meta/adam_step"][0]))
    for k, t in params.tensors.items():
        if f"adam/m/{k}" not in records:
            raise CheckpointFormatError(f"optimizer state for {k} missing")
        adam.m[k] = records[f"adam/m/{k}"].reshape(t.shape).copy()
        adam.v[k] = records[f"adam/v/{k}"].reshape(t.shape).copy()
    return adam, epoch


def train(
    dataset: Sequence[TrainSample],
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    out_dir=None,
    params: Optional[NetworkParams] = None,
    adam: Optional[AdamState] = None,
    start_epoch: int = 0,
    on_step: Optional[Callable[[int, float], None]] = None,
) -> tuple[NetworkParams, list[EpochRecord]]:
    """Mini-batch Adam training.

    Every step augments each sample, regenerates its target grid from the
    augmented labelled points, runs the network in training mode and applies
    one optimizer update. The training mIoU of an epoch is measured on the
    training-mode predictions of its steps. With ``out_dir``, the metrics log
    and one checkpoint per epoch are written there.
    """
    if len(dataset) == 0:
        raise EmptyDataset("training set is empty")
    if params is None:
        params = init_params(model_cfg, np.random.default_rng([cfg.seed, 0x5EED]))
    adam = adam or AdamState.for_params(params.tensors)
    lam = cfg.resolved_loss_weights()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    records: list[EpochRecord] = []
    step = adam.step
    for epoch in range(start_epoch, cfg.epochs):
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
        rng = _epoch_rng(cfg.seed, epoch)
        aug_rng = _epoch_rng(cfg.augment.seed, epoch)
        order = rng.permutation(len(dataset)) if cfg.shuffle else np.arange(len(dataset))
        cm = ConfusionMatrix.empty(model_cfg.K)
        losses = []
        for b0 in range(0, len(order), cfg.batch_size):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            batch = [dataset[i] for i in order[b0 : b0 + cfg.batch_size]]
            inputs, targets = [], []
            for s in batch:
                tf = sample_transform(cfg.augment, aug_rng)
                origin = tf.apply_xyz(np.asarray(s.origin, dtype=np.float64))
                inputs.append(prepare_input(tf.apply(s.cloud), model_cfg, rng, origin))
                targets.append(target_for(s, tf, cfg, model_cfg).class_id)
            logits = forward_batch(inputs, model_cfg, params, train=True)
            target = np.stack(targets)
            if not np.all(np.isfinite(logits.data)):
                raise DivergedLoss(f"non-finite logits at step {step}")
            loss = weighted_ce_loss(logits, target, lam)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergedLoss(f"loss became {value} at step {step}")
            for t in params.tensors.values():
                t.grad = None
            backward(loss)
            grads = {k: t.grad for k, t in params.tensors.items() if t.grad is not None}
            adam_step(params.tensors, grads, adam, cfg.lr, weight_decay=cfg.weight_decay)
            step += 1
            losses.append(value)
            pred = np.argmax(logits.data, axis=-1)
            for p, g in zip(pred, target):
                cm = accumulate(cm, p, g)
            if on_step is not None:
                on_step(step, value)
        if not losses:
            break
        rec = EpochRecord(epoch, float(np.mean(losses)), miou(cm), step)
        records.append(rec)
        log.info("epoch %d loss %.6f miou %.4f", epoch, rec.loss, rec.miou)
        if out is not None:
            save_checkpoint(out / f"epoch_{epoch:03d}.psnc", params, adam, epoch + 1)
            save_checkpoint(out / "last.psnc", params, adam, epoch + 1)
            log_path = out / "metrics.tsv"
            prev = log_path.read_text() if start_epoch > 0 and log_path.exists() else None
            text = _merge_log(prev, records) if prev else format_metrics_log(records)
            atomic_write_bytes(log_path, text.encode())
    return params, records


def _merge_log(prev: str, records: Sequence[EpochRecord]) -> str:
    """Keep earlier epochs of a resumed run and append the new ones."""
    first = records[0].epoch
    kept = [ln for ln in prev.splitlines()[1:] if ln and int(ln.split("\t")[0]) < first]
    new = format_metrics_log(records).splitlines()[1:]
    return "\n".join(["epoch\tloss\tmiou", *kept, *new]) + "\n"
