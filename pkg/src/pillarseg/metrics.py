"""Confusion matrices, IoU / mIoU and the sparse and dense evaluation protocols."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .dataset_io import CLASS_NAMES, NUM_CLASSES, UNLABELED
from .errors import LengthMismatch, MissingObservability, ShapeMismatch

PROTOCOLS = ("sparse_eval", "dense_eval")


@dataclass(eq=False)
class ConfusionMatrix:
    """``K x K`` counts; rows are ground truth, columns are predictions."""

    counts: np.ndarray

    @classmethod
    def empty(cls, K: int = NUM_CLASSES) -> "ConfusionMatrix":
        return cls(np.zeros((K, K), dtype=np.int64))

    @property
    def K(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    def tp(self) -> np.ndarray:
        return np.diag(self.counts)

    def fp(self) -> np.ndarray:
        return self.counts.sum(axis=0) - self.tp()

    def fn(self) -> np.ndarray:
        return self.counts.sum(axis=1) - self.tp()


def _grid(x) -> np.ndarray:
    return np.asarray(getattr(x, "class_id", x))


def accumulate(cm: ConfusionMatrix, pred, gt, mask=None) -> ConfusionMatrix:
    """Add the cells with a label (and, given a mask, observed) to ``cm``."""
    p, g = _grid(pred), _grid(gt)
    if p.shape != g.shape:
        raise ShapeMismatch(f"prediction {p.shape} and ground truth {g.shape} differ")
    keep = g != UNLABELED
    if mask is not None:
        m = np.asarray(getattr(mask, "observed", mask), dtype=bool)
        if m.shape != g.shape:
            raise ShapeMismatch(f"mask {m.shape} and ground truth {g.shape} differ")
        keep &= m
    K = cm.K
    gk, pk = g[keep].astype(np.int64), p[keep].astype(np.int64)
    if ((gk >= K) | (pk >= K)).any():
        raise ValueError(f"class ids must be below {K} (or {UNLABELED} in the ground truth)")
    add = np.bincount(gk * K + pk, minlength=K * K).reshape(K, K)
    return ConfusionMatrix(cm.counts + add)


def is_present(cm: ConfusionMatrix, k: int) -> bool:
    """True when class ``k`` occurs in the ground truth or the predictions."""
    return bool(cm.counts[k, :].sum() + cm.counts[:, k].sum() > 0)


def iou(cm: ConfusionMatrix, k: int) -> float:
    """``TP / (TP + FP + FN)``; 1.0 for a class absent from both sides (see :func:`is_present`)."""
    tp = int(cm.counts[k, k])
    denom = int(cm.counts[k, :].sum() + cm.counts[:, k].sum()) - tp
    return 1.0 if denom == 0 else tp / denom


def miou(cm: ConfusionMatrix) -> float:
    """Mean IoU over the classes present; NaN when nothing was evaluated."""
    vals = [iou(cm, k) for k in range(cm.K) if is_present(cm, k)]
    return float(np.mean(vals)) if vals else float("nan")


@dataclass(eq=False)
class EvalReport:
    protocol: str
    cm: ConfusionMatrix
    ious: np.ndarray
    present: np.ndarray
    miou: float

    @property
    def evaluated_cells(self) -> int:
        return self.cm.total

    @property
    def empty(self) -> bool:
        return self.cm.total == 0

    def format(self, names: Sequence[str] = CLASS_NAMES) -> str:
        """Tab-separated per-class IoU table (in percent) followed by key=value lines."""
        header = "\t".join(["protocol", *names, "mIoU"])

        def pct(v: float, ok: bool = True) -> str:
            return f"{100.0 * v:.1f}" if ok and np.isfinite(v) else "-"

        row = "\t".join([self.protocol, *(pct(v, ok) for v, ok in zip(self.ious, self.present)), pct(self.miou)])
        lines = [header, row, ""]
        lines.append(f"protocol={self.protocol}")
        lines.append(f"evaluated_cells={self.evaluated_cells}")
        lines.append(f"miou={float(self.miou)!r}")
        for name, v, ok in zip(names, self.ious, self.present):
            lines.append(f"iou.{name}={float(v)!r}" if ok else f"iou.{name}=absent")
        if self.empty:
            lines.append("status=no evaluated cells")
        return "\n".join(lines) + "\n"


def report(cm: ConfusionMatrix, protocol: str = "sparse_eval") -> EvalReport:
    ious = np.array([iou(cm, k) for k in range(cm.K)])
    present = np.array([is_present(cm, k) for k in range(cm.K)])
    return EvalReport(protocol, cm, ious, present, miou(cm))


def evaluate(
    preds: Sequence,
    gts: Sequence,
    protocol: str = "sparse_eval",
    obs_maps: Optional[Sequence] = None,
    K: int = NUM_CLASSES,
) -> EvalReport:
    """Micro-averaged IoU over a whole set of scans.

    ``dense_eval`` restricts each scan to its observed cells; ``obs_maps``
    holds :class:`ObservedMask` objects, observability maps or boolean grids.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"protocol must be one of {PROTOCOLS}, got {protocol!r}")
    if len(preds) != len(gts):
        raise LengthMismatch(f"{len(preds)} predictions for {len(gts)} ground-truth grids")
    if protocol == "dense_eval":
        if obs_maps is None:
            raise MissingObservability("dense_eval needs observability maps")
        if len(obs_maps) != len(gts):
            raise LengthMismatch(f"{len(obs_maps)} observability maps for {len(gts)} ground-truth grids")
    cm = ConfusionMatrix.empty(K)
    for n, (p, g) in enumerate(zip(preds, gts)):
        mask = None
        if protocol == "dense_eval":
            mask = _observed(obs_maps[n])
        cm = accumulate(cm, p, g, mask)
    return report(cm, protocol)


def _observed(obs) -> np.ndarray:
    if hasattr(obs, "observed"):
        return obs.observed
    if hasattr(obs, "transmissions"):
        return (obs.transmissions >= 1) | (obs.hits >= 1)
    return np.asarray(obs, dtype=bool)
