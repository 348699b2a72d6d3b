"""KITTI / SemanticKITTI readers and writers.

Scans are headerless little-endian ``float32`` quadruples ``(x, y, z, r)``.
Label files hold one little-endian ``uint32`` word per point whose lower
16 bits are the raw semantic id (the upper 16 bits carry the instance id,
which is ignored here). Raw ids are merged into the 12 training classes
through a :class:`ClassTable`.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import (
    MalformedPoseLine,
    MappingFileError,
    MissingCalibTr,
    NonFiniteValue,
    PairMismatch,
    TruncatedLabels,
    TruncatedScan,
    UnknownRawId,
)

UNLABELED = 255
NUM_CLASSES = 12

CLASS_NAMES = (
    "vehicle",
    "person",
    "two-wheel",
    "rider",
    "road",
    "sidewalk",
    "other-ground",
    "building",
    "object",
    "vegetation",
    "trunk",
    "terrain",
)
VEHICLE, PERSON, TWO_WHEEL, RIDER, ROAD, SIDEWALK, OTHER_GROUND, BUILDING, OBJECT, VEGETATION, TRUNK, TERRAIN = range(12)

# RGB, taken from the SemanticKITTI colour of the representative raw class.
DEFAULT_PALETTE = (
    (0, 0, 255),
    (255, 30, 30),
    (30, 60, 150),
    (90, 30, 150),
    (255, 0, 255),
    (75, 0, 75),
    (255, 150, 255),
    (255, 200, 0),
    (255, 120, 50),
    (0, 175, 0),
    (135, 60, 0),
    (150, 240, 80),
)

# raw id -> (merged id, moving flag). Static ids follow the 19-class
# SemanticKITTI learning map, merged down to 12 classes.
_DEFAULT_MAPPING: dict[int, tuple[int, bool]] = {
    0: (UNLABELED, False),  # unlabeled
    1: (UNLABELED, False),  # outlier
    10: (VEHICLE, False),  # car
    11: (TWO_WHEEL, False),  # bicycle
    13: (VEHICLE, False),  # bus -> other-vehicle
    15: (TWO_WHEEL, False),  # motorcycle
    16: (VEHICLE, False),  # on-rails -> other-vehicle
    18: (VEHICLE, False),  # truck
    20: (VEHICLE, False),  # other-vehicle
    30: (PERSON, False),  # person
    31: (RIDER, False),  # bicyclist
    32: (RIDER, False),  # motorcyclist
    40: (ROAD, False),  # road
    44: (OTHER_GROUND, False),  # parking
    48: (SIDEWALK, False),  # sidewalk
    49: (OTHER_GROUND, False),  # other-ground
    50: (BUILDING, False),  # building
    51: (OBJECT, False),  # fence
    52: (UNLABELED, False),  # other-structure
    60: (ROAD, False),  # lane-marking -> road
    70: (VEGETATION, False),  # vegetation
    71: (TRUNK, False),  # trunk
    72: (TERRAIN, False),  # terrain
    80: (OBJECT, False),  # pole
    81: (OBJECT, False),  # traffic-sign
    99: (UNLABELED, False),  # other-object
    252: (VEHICLE, True),  # moving-car -> 10
    253: (RIDER, True),  # moving-bicyclist -> 31
    254: (PERSON, True),  # moving-person -> 30
    255: (RIDER, True),  # moving-motorcyclist -> 32
    256: (VEHICLE, True),  # moving-on-rails -> 16
    257: (VEHICLE, True),  # moving-bus -> 13
    258: (VEHICLE, True),  # moving-truck -> 18
    259: (VEHICLE, True),  # moving-other-vehicle -> 20
}

# merged id -> (static raw id, moving raw id or None), used when writing labels
_CANONICAL_RAW = {
    UNLABELED: (0, None),
    VEHICLE: (10, 252),
    PERSON: (30, 254),
    TWO_WHEEL: (11, None),
    RIDER: (31, 253),
    ROAD: (40, None),
    SIDEWALK: (48, None),
    OTHER_GROUND: (49, None),
    BUILDING: (50, None),
    OBJECT: (51, None),
    VEGETATION: (70, None),
    TRUNK: (71, None),
    TERRAIN: (72, None),
}


@dataclass(frozen=True)
class ClassTable:
    """Raw SemanticKITTI id to merged class mapping."""

    raw_to_merged: Mapping[int, int]
    moving: frozenset = frozenset()
    names: tuple = CLASS_NAMES
    palette: tuple = DEFAULT_PALETTE

    def __post_init__(self):
        for raw, merged in self.raw_to_merged.items():
            if not (0 <= raw <= 0xFFFF):
                raise MappingFileError(f"raw id {raw} does not fit in 16 bits")
            if merged != UNLABELED and not (0 <= merged < NUM_CLASSES):
                raise MappingFileError(f"merged id {merged} for raw id {raw} out of range")

    def lookup_tables(self) -> tuple[np.ndarray, np.ndarray]:
        """Dense 65536-entry (merged id, moving) tables; unknown ids map to -1."""
        merged = np.full(1 << 16, -1, dtype=np.int32)
        moving = np.zeros(1 << 16, dtype=bool)
        for raw, m in self.raw_to_merged.items():
            merged[raw] = m
        for raw in self.moving:
            moving[raw] = True
        return merged, moving


def default_class_table() -> ClassTable:
    return ClassTable(
        raw_to_merged={raw: m for raw, (m, _) in _DEFAULT_MAPPING.items()},
        moving=frozenset(raw for raw, (_, mv) in _DEFAULT_MAPPING.items() if mv),
    )


def parse_mapping(text: str) -> ClassTable:
    """Parse a ``raw_id merged_id moving_flag`` mapping file."""
    raw_to_merged = {}
    moving = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise MappingFileError(f"line {lineno}: expected 3 fields, got {len(parts)}")
        try:
            raw, merged, flag = (int(p) for p in parts)
        except ValueError as exc:
            raise MappingFileError(f"line {lineno}: {exc}") from None
        if flag not in (0, 1):
            raise MappingFileError(f"line {lineno}: moving flag must be 0 or 1")
        if raw in raw_to_merged:
            raise MappingFileError(f"line {lineno}: duplicate raw id {raw}")
        raw_to_merged[raw] = merged
        if flag:
            moving.add(raw)
    return ClassTable(raw_to_merged=raw_to_merged, moving=frozenset(moving))


def format_mapping(table: ClassTable) -> str:
    lines = ["# raw_id merged_id moving_flag"]
    for raw in sorted(table.raw_to_merged):
        lines.append(f"{raw} {table.raw_to_merged[raw]} {int(raw in table.moving)}")
    return "\n".join(lines) + "\n"


@dataclass(eq=False)
class PointCloud:
    """LiDAR points as an ``(n, 4)`` float64 array of ``(x, y, z, r)``."""

    points: np.ndarray
    frame_id: int = 0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 4)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ValueError(f"points must have shape (n, 4), got {pts.shape}")
        self.points = pts

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def reflectance(self) -> np.ndarray:
        return self.points[:, 3]

    @classmethod
    def empty(cls, frame_id: int = 0) -> "PointCloud":
        return cls(np.zeros((0, 4)), frame_id)


@dataclass(eq=False)
class LabelSet:
    """Per-point merged class ids (255 = unlabeled) and moving flags.

    ``raw`` keeps the original label words when the set was parsed from a
    file, so that writing it back reproduces the file byte for byte.
    """

    class_id: np.ndarray
    moving: np.ndarray
    raw: Optional[np.ndarray] = None

    def __post_init__(self):
        self.class_id = np.asarray(self.class_id, dtype=np.uint8).reshape(-1)
        self.moving = np.asarray(self.moving, dtype=bool).reshape(-1)
        if self.class_id.shape != self.moving.shape:
            raise PairMismatch("class_id and moving flags differ in length")
        bad = (self.class_id >= NUM_CLASSES) & (self.class_id != UNLABELED)
        if bad.any():
            raise ValueError(f"invalid class ids {np.unique(self.class_id[bad]).tolist()}")
        if self.raw is not None:
            self.raw = np.asarray(self.raw, dtype=np.uint32).reshape(-1)
            if self.raw.shape != self.class_id.shape:
                raise PairMismatch("raw words and class ids differ in length")

    def __len__(self) -> int:
        return self.class_id.shape[0]

    def subset(self, keep: np.ndarray) -> "LabelSet":
        raw = None if self.raw is None else self.raw[keep]
        return LabelSet(self.class_id[keep], self.moving[keep], raw)


def check_pair(cloud: PointCloud, labels: Optional[LabelSet]) -> None:
    if labels is not None and len(labels) != len(cloud):
        raise PairMismatch(f"cloud has {len(cloud)} points but labels have {len(labels)} entries")


@dataclass(eq=False)
class Pose:
    """Rigid transform ``p -> rotation @ p + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3].copy(), m[:3, 3].copy())

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """``self * other``: apply ``other`` first."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def orthonormality_error(self) -> float:
        r = self.rotation
        return max(float(np.abs(r.T @ r - np.eye(3)).max()), abs(float(np.linalg.det(r)) - 1.0))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(self.translation, other.translation)

    __hash__ = None


def relative_pose(target: Pose, source: Pose) -> Pose:
    """Transform taking points of ``source``'s frame into ``target``'s frame."""
    if target == source:
        return Pose.identity()
    return target.inverse().compose(source)


def _orthonormalize(r: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(r)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


# --- scans -----------------------------------------------------------------

def parse_scan(data: bytes, frame_id: int = 0) -> PointCloud:
    if len(data) % 16:
        raise TruncatedScan(f"scan length {len(data)} is not a multiple of 16 bytes")
    raw = np.frombuffer(data, dtype="<f4").reshape(-1, 4)
    if not np.isfinite(raw).all():
        bad = int(np.argwhere(~np.isfinite(raw))[0, 0])
        raise NonFiniteValue(f"point {bad} contains a NaN or infinite value")
    return PointCloud(raw.astype(np.float64), frame_id)


def serialize_scan(cloud: PointCloud) -> bytes:
    return cloud.points.astype("<f4").tobytes()


def read_scan(path: str | os.PathLike, frame_id: int = 0) -> PointCloud:
    return parse_scan(Path(path).read_bytes(), frame_id)


def write_scan(path: str | os.PathLike, cloud: PointCloud) -> None:
    atomic_write_bytes(path, serialize_scan(cloud))


# --- labels ----------------------------------------------------------------

def parse_labels(data: bytes, table: Optional[ClassTable] = None) -> LabelSet:
    if len(data) % 4:
        raise TruncatedLabels(f"label length {len(data)} is not a multiple of 4 bytes")
    table = table or default_class_table()
    words = np.frombuffer(data, dtype="<u4").astype(np.uint32)
    semantic = words & 0xFFFF
    merged_lut, moving_lut = table.lookup_tables()
    merged = merged_lut[semantic]
    if (merged < 0).any():
        unknown = np.unique(semantic[merged < 0]).tolist()
        raise UnknownRawId(f"raw semantic ids not in class table: {unknown}")
    return LabelSet(merged.astype(np.uint8), moving_lut[semantic], raw=words)


def encode_labels(labels: LabelSet) -> np.ndarray:
    """Label words for ``labels``, reusing the parsed raw words when present."""
    if labels.raw is not None:
        return labels.raw
    words = np.zeros(len(labels), dtype=np.uint32)
    for merged, (static_id, moving_id) in _CANONICAL_RAW.items():
        sel = labels.class_id == merged
        if not sel.any():
            continue
        mov = sel & labels.moving
        if mov.any() and moving_id is None:
            raise ValueError(f"class {merged} has no moving raw id")
        words[sel] = static_id
        if moving_id is not None:
            words[mov] = moving_id
    return words


def serialize_labels(labels: LabelSet) -> bytes:
    return encode_labels(labels).astype("<u4").tobytes()


def read_labels(path: str | os.PathLike, table: Optional[ClassTable] = None) -> LabelSet:
    return parse_labels(Path(path).read_bytes(), table)


def write_labels(path: str | os.PathLike, labels: LabelSet) -> None:
    atomic_write_bytes(path, serialize_labels(labels))


# --- poses -----------------------------------------------------------------

def _parse_12(fields: Sequence[str], what: str) -> np.ndarray:
    if len(fields) != 12:
        raise MalformedPoseLine(f"{what}: expected 12 values, got {len(fields)}")
    try:
        vals = np.array([float(f) for f in fields])
    except ValueError:
        raise MalformedPoseLine(f"{what}: non-numeric value") from None
    if not np.isfinite(vals).all():
        raise MalformedPoseLine(f"{what}: non-finite value")
    m = np.eye(4)
    m[:3, :] = vals.reshape(3, 4)
    return m


def parse_calib_tr(calib_text: str) -> np.ndarray:
    """The ``Tr:`` LiDAR-to-camera matrix as a 4x4 array."""
    for line in calib_text.splitlines():
        line = line.strip()
        if line.startswith("Tr:"):
            return _parse_12(line[3:].split(), "calib Tr")
    raise MissingCalibTr("calibration has no 'Tr:' line")


def parse_poses(pose_text: str, calib_text: str) -> list[Pose]:
    """LiDAR-to-world poses, ``T_w_velo = T_w_cam @ Tr``."""
    tr = parse_calib_tr(calib_text)
    poses = []
    for lineno, line in enumerate(pose_text.splitlines(), 1):
        if not line.strip():
            continue
        pose = Pose.from_matrix(_parse_12(line.split(), f"pose line {lineno}") @ tr)
        if pose.orthonormality_error() > 1e-6:
            pose.rotation = _orthonormalize(pose.rotation)
        poses.append(pose)
    return poses


def format_pose_line(pose: Pose) -> str:
    return " ".join(repr(float(v)) for v in pose.matrix()[:3, :].ravel())


def format_calib(tr: Optional[Pose] = None) -> str:
    tr = tr or Pose.identity()
    return "Tr: " + format_pose_line(tr) + "\n"


def transform_cloud(cloud: PointCloud, pose: Pose) -> PointCloud:
    pts = cloud.points.copy()
    pts[:, :3] = cloud.xyz @ pose.rotation.T + pose.translation
    return PointCloud(pts, cloud.frame_id)


# --- sequence layout -------------------------------------------------------

def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    tmp.write_bytes(data)
    os.replace(tmp, path)


@dataclass(frozen=True)
class SequenceLayout:
    """Paths of a KITTI odometry sequence directory."""

    root: Path

    def __post_init__(self):
        object.__setattr__(self, "root", Path(self.root))

    @property
    def velodyne_dir(self) -> Path:
        return self.root / "velodyne"

    @property
    def labels_dir(self) -> Path:
        return self.root / "labels"

    @property
    def poses_path(self) -> Path:
        return self.root / "poses.txt"

    @property
    def calib_path(self) -> Path:
        return self.root / "calib.txt"

    def scan_path(self, idx: int) -> Path:
        return self.velodyne_dir / f"{idx:06d}.bin"

    def label_path(self, idx: int) -> Path:
        return self.labels_dir / f"{idx:06d}.label"

    def scan_indices(self) -> list[int]:
        if not self.velodyne_dir.is_dir():
            return []
        return sorted(int(p.stem) for p in self.velodyne_dir.glob("*.bin") if p.stem.isdigit())

    def read_scan(self, idx: int) -> PointCloud:
        return read_scan(self.scan_path(idx), frame_id=idx)

    def read_labels(self, idx: int, table: Optional[ClassTable] = None) -> LabelSet:
        return read_labels(self.label_path(idx), table)

    def read_poses(self) -> list[Pose]:
        return parse_poses(self.poses_path.read_text(), self.calib_path.read_text())


def write_sequence(
    root: str | os.PathLike,
    clouds: Iterable[PointCloud],
    labels: Iterable[LabelSet],
    poses: Sequence[Pose],
    tr: Optional[Pose] = None,
) -> SequenceLayout:
    """Write scans, labels, ``poses.txt`` and ``calib.txt`` in KITTI layout.

    ``poses`` are LiDAR-to-world; the written camera poses are
    ``T_w_velo @ Tr^-1`` so that :func:`parse_poses` recovers them.
    """
    layout = SequenceLayout(Path(root))
    layout.velodyne_dir.mkdir(parents=True, exist_ok=True)
    layout.labels_dir.mkdir(parents=True, exist_ok=True)
    tr = tr or Pose.identity()
    tr_inv = tr.inverse()
    for idx, (cloud, lab) in enumerate(zip(clouds, labels)):
        check_pair(cloud, lab)
        write_scan(layout.scan_path(idx), cloud)
        write_labels(layout.label_path(idx), lab)
    lines = [format_pose_line(p if tr == Pose.identity() else p.compose(tr_inv)) for p in poses]
    atomic_write_bytes(layout.poses_path, ("\n".join(lines) + "\n").encode())
    atomic_write_bytes(layout.calib_path, format_calib(tr).encode())
    return layout
