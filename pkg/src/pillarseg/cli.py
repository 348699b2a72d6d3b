"""``pillarseg`` command-line entry point.

Exit codes: 0 success, 1 I/O failure, 2 usage or format error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .config import Config, load_config
from .dataset_io import DEFAULT_PALETTE, UNLABELED, PointCloud, SequenceLayout, atomic_write_bytes, read_scan
from .errors import FormatError, MissingInput, NumericError
from .groundtruth import aggregate_scans, dense_gt, select_neighbors, sparse_gt
from .grid import crop_cloud
from .metrics import evaluate
from .model import forward, init_params, predict
from .occupancy import observability_map, voxel_occupancy
from .sgrid import DTYPE_F32, DTYPE_U8, DTYPE_U32, SgridFile, make_sgrid, read_sgrid, write_sgrid
from .synthetic import TOY_FAN, random_scene, render_sequence, straight_trajectory, street_scene
from .trainer import TrainSample, load_checkpoint, train

log = logging.getLogger("pillarseg")

EXIT_OK, EXIT_IO, EXIT_FORMAT, EXIT_NUMERIC = 0, 1, 2, 3
# set on observability grids whose second layer holds endpoint hits
FLAG_HITS_LAYER = 1


def worker_count() -> int:
    raw = os.environ.get("PILLARSEG_THREADS")
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise FormatError(f"PILLARSEG_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise FormatError("PILLARSEG_THREADS must be at least 1")
    return n


def _parallel_map(fn: Callable, items: Iterable) -> list:
    items = list(items)
    n = worker_count()
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _config(path: Optional[str]) -> Config:
    return Config() if path is None else load_config(path)


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingInput(f"{what} not found: {path}")
    return path


def _origin(values) -> np.ndarray:
    return np.zeros(3) if values is None else np.asarray(values, dtype=np.float64)


# --- gt --------------------------------------------------------------------------

def cmd_gt(args) -> int:
    cfg = _config(args.config)
    layout = SequenceLayout(Path(args.sequence))
    _require(layout.velodyne_dir, "velodyne directory")
    _require(layout.labels_dir, "labels directory")
    indices = layout.scan_indices()
    if args.all:
        targets = indices
    else:
        if args.scan not in indices:
            raise MissingInput(f"scan {args.scan} not found: {layout.scan_path(args.scan)}")
        targets = [args.scan]
    weights = cfg.train.resolved_gt_weights()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.mode == "dense":
        _require(layout.poses_path, "poses file")
        _require(layout.calib_path, "calibration file")
        poses = layout.read_poses()
        if len(poses) < len(indices):
            raise FormatError(f"{layout.poses_path} has {len(poses)} poses for {len(indices)} scans")
        scans = _LazyScans(layout)
        labels = _LazyLabels(layout)

    def job(idx: int) -> None:
        if args.mode == "sparse":
            grid = sparse_gt(layout.read_scan(idx), layout.read_labels(idx), cfg.grid, weights)
        else:
            grid = dense_gt(scans, labels, poses, idx, cfg.grid, weights, cfg.neighbors)
        write_sgrid(out / f"{idx:06d}.sgrid", make_sgrid(grid.class_id, DTYPE_U8))

    _parallel_map(job, targets)
    log.info("wrote %d ground-truth grids to %s", len(targets), out)
    return EXIT_OK


class _LazyScans:
    def __init__(self, layout: SequenceLayout):
        self.layout = layout

    def __getitem__(self, idx: int) -> PointCloud:
        return self.layout.read_scan(idx)


class _LazyLabels(_LazyScans):
    def __getitem__(self, idx: int):
        return self.layout.read_labels(idx)


# --- gridmap ---------------------------------------------------------------------------

def cmd_gridmap(args) -> int:
    cfg = _config(args.config)
    cloud = read_scan(_require(Path(args.scan), "scan"))
    origin = _origin(args.origin)
    if args.kind == "observability":
        obs = observability_map(cloud, origin, cfg.grid)
        data = np.stack([obs.transmissions, obs.hits], axis=-1)
        write_sgrid(args.out, make_sgrid(data, DTYPE_U32, FLAG_HITS_LAYER))
    else:
        occ = voxel_occupancy(cloud, origin, cfg.grid)
        write_sgrid(args.out, make_sgrid(occ.probability, DTYPE_F32))
    return EXIT_OK


def observed_from_sgrid(grid: SgridFile) -> np.ndarray:
    """Observed cells of an observability SGRID (transmissions, plus hits when stored)."""
    if grid.dtype != DTYPE_U32:
        raise FormatError("observability grids must hold u32 counts")
    observed = grid.data[:, :, 0] >= 1
    if grid.flags & FLAG_HITS_LAYER and grid.data.shape[2] > 1:
        observed |= grid.data[:, :, 1] >= 1
    return observed


# --- train -------------------------------------------------------------------------------

def load_training_set(dirs: Sequence[str], cfg: Config) -> list[TrainSample]:
    samples = []
    for d in dirs:
        layout = SequenceLayout(Path(d))
        _require(layout.velodyne_dir, "velodyne directory")
        _require(layout.labels_dir, "labels directory")
        idx = layout.scan_indices()
        clouds = {i: layout.read_scan(i) for i in idx}
        labels = {i: layout.read_labels(i) for i in idx}
        if cfg.train.mode == "dense":
            _require(layout.poses_path, "poses file")
            _require(layout.calib_path, "calibration file")
            poses = layout.read_poses()
            for i in idx:
                nb = [j for j in select_neighbors(poses, i, cfg.neighbors) if j in clouds]
                gc, gl = aggregate_scans(clouds, labels, poses, i, nb)
                samples.append(TrainSample(clouds[i], labels[i], gt_cloud=gc, gt_labels=gl))
        else:
            samples += [TrainSample(clouds[i], labels[i]) for i in idx]
    return samples


def cmd_train(args) -> int:
    cfg = load_config(_require(Path(args.config), "config file"))
    data = load_training_set(args.data, cfg)
    out = Path(args.out)
    params = adam = None
    start = 0
    if args.resume:
        ckpt = _require(out / "last.psnc", "checkpoint")
        params = init_params(cfg.model, np.random.default_rng(0))
        adam, start = load_checkpoint(ckpt, params)
    _, records = train(data, cfg.train, cfg.model, out_dir=out, params=params, adam=adam, start_epoch=start)
    if records:
        log.info("final epoch %d: loss %.6f miou %.4f", records[-1].epoch, records[-1].loss, records[-1].miou)
    return EXIT_OK


# --- eval / infer / render ------------------------------------------------------------------

def cmd_eval(args) -> int:
    pred_dir = _require(Path(args.pred), "prediction directory")
    gt_dir = _require(Path(args.gt), "ground-truth directory")
    names = sorted(p.name for p in gt_dir.glob("*.sgrid"))
    preds, gts, obs = [], [], []
    for name in names:
        gts.append(read_sgrid(gt_dir / name).grid2d())
        preds.append(read_sgrid(_require(pred_dir / name, "prediction")).grid2d())
        if args.obs is not None:
            obs.append(observed_from_sgrid(read_sgrid(_require(Path(args.obs) / name, "observability grid"))))
    rep = evaluate(preds, gts, args.protocol, obs if args.obs is not None else None)
    sys.stdout.write(rep.format())
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg = _config(args.config)
    params = init_params(cfg.model, np.random.default_rng(0))
    load_checkpoint(_require(Path(args.checkpoint), "checkpoint"), params)
    cloud = read_scan(_require(Path(args.scan), "scan"))
    logits = forward(cloud, cfg.model, params, np.random.default_rng(args.seed), train=False, origin=_origin(args.origin))
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("network produced non-finite logits")
    grid, probs = predict(logits)
    write_sgrid(args.out, make_sgrid(grid.class_id, DTYPE_U8))
    if args.probs:
        write_sgrid(args.probs, make_sgrid(probs, DTYPE_F32))
    return EXIT_OK


def parse_palette(text: str) -> dict[int, tuple[int, int, int]]:
    """Lines of ``class_id r g b``; ``#`` starts a comment."""
    pal = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            k, r, g, b = (int(v) for v in parts)
        except ValueError:
            raise FormatError(f"palette line {n}: expected 'id r g b', got {line!r}") from None
        if not all(0 <= v <= 255 for v in (k, r, g, b)):
            raise FormatError(f"palette line {n}: values must lie in 0..255")
        pal[k] = (r, g, b)
    return pal


def render_ppm(class_id: np.ndarray, palette=None, observed: Optional[np.ndarray] = None, dim: float = 0.35) -> bytes:
    """Binary P6 image of a ``(W, H)`` class grid; ``j`` grows upwards, 255 is black."""
    pal = {k: c for k, c in enumerate(DEFAULT_PALETTE)} if palette is None else dict(palette)
    lut = np.zeros((256, 3), dtype=np.float64)
    for k, c in pal.items():
        if k != UNLABELED:
            lut[k] = c
    rgb = lut[np.asarray(class_id, dtype=np.uint8)]
    if observed is not None:
        rgb[~observed] *= dim
    img = np.round(rgb).astype(np.uint8).transpose(1, 0, 2)[::-1]
    H, W = img.shape[:2]
    return f"P6\n{W} {H}\n255\n".encode() + np.ascontiguousarray(img).tobytes()


def cmd_render(args) -> int:
    grid = read_sgrid(_require(Path(args.sgrid), "grid"))
    if grid.dtype != DTYPE_U8:
        raise FormatError("render expects a class-id grid (dtype 0)")
    palette = None
    if args.palette:
        palette = parse_palette(_require(Path(args.palette), "palette").read_text())
    observed = None
    if args.obs:
        observed = observed_from_sgrid(read_sgrid(_require(Path(args.obs), "observability grid")))
        if observed.shape != grid.data.shape[:2]:
            raise FormatError("observability grid does not match the class grid")
    atomic_write_bytes(Path(args.out), render_ppm(grid.grid2d(), palette, observed))
    return EXIT_OK


def cmd_synth(args) -> int:
    make = street_scene if args.scene == "street" else random_scene
    scene = make(args.seed, **TOY_FAN)
    render_sequence(scene, straight_trajectory(args.scans, args.step), root=args.out)
    return EXIT_OK


# --- parser ------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pillarseg", description="Top-view semantic grids from LiDAR scans.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gt", help="generate sparse or dense ground-truth grids")
    g.add_argument("--mode", choices=("sparse", "dense"), default="sparse")
    g.add_argument("--sequence", required=True)
    sel = g.add_mutually_exclusive_group(required=True)
    sel.add_argument("--scan", type=int)
    sel.add_argument("--all", action="store_true")
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.set_defaults(func=cmd_gt)

    m = sub.add_parser("gridmap", help="observability map or voxel occupancy of one scan")
    m.add_argument("--scan", required=True)
    m.add_argument("--kind", choices=("observability", "voxel"), required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--config")
    m.add_argument("--origin", type=float, nargs=3)
    m.set_defaults(func=cmd_gridmap)

    t = sub.add_parser("train", help="train the network")
    t.add_argument("--data", required=True, action="append", help="sequence directory (repeatable)")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="IoU report of predicted grids against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--protocol", choices=("sparse_eval", "dense_eval"), default="sparse_eval")
    e.add_argument("--obs")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="predict the class grid of one scan")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--scan", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--probs")
    i.add_argument("--config")
    i.add_argument("--origin", type=float, nargs=3)
    i.add_argument("--seed", type=int, default=0, help="seed for pillar subsampling")
    i.set_defaults(func=cmd_infer)

    r = sub.add_parser("render", help="write a class grid as a P6 pixmap")
    r.add_argument("--sgrid", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--palette")
    r.add_argument("--obs")
    r.set_defaults(func=cmd_render)

    s = sub.add_parser("synth", help="write a synthetic labelled sequence")
    s.add_argument("--out", required=True)
    s.add_argument("--scans", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--step", type=float, default=1.0)
    s.add_argument("--scene", choices=("street", "random"), default="street")
    s.set_defaults(func=cmd_synth)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except FormatError as exc:
        print(f"pillarseg: error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except NumericError as exc:
        print(f"pillarseg: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"pillarseg: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
