"""Bit-exact SemanticKITTI readers and writers plus the 4-class remap.

Directory layout of one sequence::

    sequences/{NN}/velodyne/{FFFFFF}.bin   consecutive float32 LE (x, y, z, intensity)
    sequences/{NN}/labels/{FFFFFF}.label   uint32 LE; low 16 bits semantic id, high 16 instance id
    sequences/{NN}/poses.txt               12 whitespace-separated floats per line (row-major 3x4,
                                           camera frame)
    sequences/{NN}/calib.txt               the line starting with ``Tr:`` holds the 12 floats of the
                                           camera-to-LiDAR extrinsic

All binary values are little-endian.  Parsing is total: well-formed input
always succeeds, malformed input raises a typed error from
:mod:`mosdistill.errors`, never a bare exception.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    IoFailure,
    LabelCountMismatch,
    MalformedCalib,
    MalformedLabel,
    MalformedPoseLine,
    MalformedScan,
)

POINT_RECORD_BYTES = 16
LABEL_RECORD_BYTES = 4

#: class ids used everywhere downstream
CLASS_UNLABELED = 0
CLASS_STATIC = 1
CLASS_MOVABLE = 2
CLASS_MOVING = 3
NUM_CLASSES = 4
CLASS_NAMES = ("unlabeled", "static", "movable", "moving")

# SemanticKITTI-MOS convention for the default remap table.
_MOVING_SEMANTIC_IDS = tuple(range(252, 260))
_MOVABLE_SEMANTIC_IDS = (10, 11, 13, 15, 18, 20, 30, 31, 32)
_UNLABELED_SEMANTIC_IDS = (0, 1)

# Representative semantic id written back out per class (used by the
# synthetic-sequence exporter).
CANONICAL_SEMANTIC_ID = {
    CLASS_UNLABELED: 0,
    CLASS_STATIC: 40,   # road
    CLASS_MOVABLE: 10,  # car
    CLASS_MOVING: 252,  # moving car
}


def _rigid_check(matrix: np.ndarray, what: str) -> np.ndarray:
    m = np.asarray(matrix, dtype=np.float64)
    if m.shape != (4, 4):
        raise ValueError(f"{what} must be 4x4, got {m.shape}")
    if not np.isfinite(m).all():
        raise ValueError(f"{what} contains non-finite entries")
    if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
        raise ValueError(f"{what} bottom row must be [0,0,0,1]")
    r = m[:3, :3]
    if np.abs(r.T @ r - np.eye(3)).max() > 1e-6:
        raise ValueError(f"{what} rotation block is not orthonormal within 1e-6")
    if np.linalg.det(r) < 0.0:
        raise ValueError(f"{what} rotation block is a reflection")
    return m


@dataclass(frozen=True)
class PointCloud:
    """One LiDAR frame: an (N, 4) array of (x, y, z, intensity)."""

    points: np.ndarray
    frame_id: int = 0

    def __post_init__(self) -> None:
        pts = np.asarray(self.points)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ValueError(f"points must be (N, 4), got {pts.shape}")
        if self.frame_id < 0:
            raise ValueError("frame_id must be non-negative")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]


@dataclass(frozen=True)
class LabelArray:
    """Raw uint32 labels, one per point of a companion cloud."""

    raw: np.ndarray

    def __post_init__(self) -> None:
        raw = np.ascontiguousarray(self.raw, dtype=np.uint32)
        if raw.ndim != 1:
            raise ValueError("raw labels must be one-dimensional")
        object.__setattr__(self, "raw", raw)

    def __len__(self) -> int:
        return self.raw.shape[0]

    @property
    def semantic(self) -> np.ndarray:
        return (self.raw & np.uint32(0xFFFF)).astype(np.uint16)

    @property
    def instance(self) -> np.ndarray:
        return (self.raw >> np.uint32(16)).astype(np.uint16)


@dataclass(frozen=True)
class ClassMap:
    """Total map from 16-bit semantic ids to the 4 task classes."""

    table: np.ndarray  # (65536,) uint8

    def __post_init__(self) -> None:
        table = np.ascontiguousarray(self.table, dtype=np.uint8)
        if table.shape != (65536,):
            raise ValueError("class map table must cover all 16-bit semantic ids")
        if table.max(initial=0) >= NUM_CLASSES:
            raise ValueError("class ids must lie in {0, 1, 2, 3}")
        object.__setattr__(self, "table", table)

    @classmethod
    def default(cls) -> "ClassMap":
        """Moving = 252..259, movable = the vehicle/person ids, 0/1 unlabeled, rest static."""
        table = np.full(65536, CLASS_STATIC, dtype=np.uint8)
        table[list(_UNLABELED_SEMANTIC_IDS)] = CLASS_UNLABELED
        table[list(_MOVABLE_SEMANTIC_IDS)] = CLASS_MOVABLE
        table[list(_MOVING_SEMANTIC_IDS)] = CLASS_MOVING
        return cls(table)

    @classmethod
    def from_overrides(cls, overrides: dict[int, int]) -> "ClassMap":
        table = cls.default().table.copy()
        for sem, c in overrides.items():
            table[sem] = c
        return cls(table)


@dataclass(frozen=True)
class Pose:
    """Rigid 4x4 transform (row-major, meters)."""

    matrix: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "matrix", _rigid_check(self.matrix, "pose"))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(4))

    @classmethod
    def from_rt(cls, rotation: np.ndarray, translation: np.ndarray) -> "Pose":
        m = np.eye(4)
        m[:3, :3] = rotation
        m[:3, 3] = translation
        return cls(m)

    def inverse(self) -> "Pose":
        r = self.matrix[:3, :3]
        t = self.matrix[:3, 3]
        m = np.eye(4)
        m[:3, :3] = r.T
        m[:3, 3] = -r.T @ t
        return Pose(m)

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(self.matrix @ other.matrix)


@dataclass(frozen=True)
class Calibration:
    """Camera-to-LiDAR extrinsic (``Tr`` in KITTI odometry calib files)."""

    tr: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "tr", _rigid_check(self.tr, "calibration Tr"))

    @classmethod
    def identity(cls) -> "Calibration":
        return cls(np.eye(4))


def read_scan(path: str | Path) -> PointCloud:
    """Parse a ``.bin`` scan into a PointCloud.

    Point count is file_size / 16; coordinates must be finite.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read scan {path}: {exc}") from exc
    if len(data) % POINT_RECORD_BYTES != 0:
        raise MalformedScan(
            f"{path}: size {len(data)} is not a multiple of {POINT_RECORD_BYTES}"
        )
    pts = np.frombuffer(data, dtype="<f4").reshape(-1, 4).copy()
    if pts.size and not np.isfinite(pts[:, :3]).all():
        raise MalformedScan(f"{path}: non-finite coordinate")
    return PointCloud(points=pts, frame_id=_frame_id_from_name(path))


def write_scan(cloud: PointCloud, path: str | Path) -> None:
    """Inverse of :func:`read_scan`; float32 LE records."""
    data = np.ascontiguousarray(cloud.points, dtype="<f4").tobytes()
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise IoFailure(f"cannot write scan {path}: {exc}") from exc


def read_labels(path: str | Path, expected_count: int) -> LabelArray:
    """Parse a ``.label`` file and check its length against the scan."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read labels {path}: {exc}") from exc
    if len(data) % LABEL_RECORD_BYTES != 0:
        raise MalformedLabel(
            f"{path}: size {len(data)} is not a multiple of {LABEL_RECORD_BYTES}"
        )
    raw = np.frombuffer(data, dtype="<u4").copy()
    if raw.shape[0] != expected_count:
        raise LabelCountMismatch(
            f"{path}: {raw.shape[0]} labels for {expected_count} points"
        )
    return LabelArray(raw=raw)


def write_labels(labels: LabelArray, path: str | Path) -> None:
    data = np.ascontiguousarray(labels.raw, dtype="<u4").tobytes()
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise IoFailure(f"cannot write labels {path}: {exc}") from exc


def remap_labels(labels: LabelArray, class_map: ClassMap | None = None) -> np.ndarray:
    """Map raw labels to class ids in {0..3}; only the low 16 bits are consulted."""
    cmap = class_map if class_map is not None else ClassMap.default()
    return cmap.table[labels.semantic]


def _frame_id_from_name(path: Path) -> int:
    stem = path.stem
    return int(stem) if stem.isdigit() else 0


def _parse_float_row(tokens: list[str], path: Path, lineno: int) -> np.ndarray:
    if len(tokens) != 12:
        raise MalformedPoseLine(
            f"{path}:{lineno}: expected 12 values, got {len(tokens)}"
        )
    try:
        row = np.array([float(tok) for tok in tokens], dtype=np.float64)
    except ValueError as exc:
        raise MalformedPoseLine(f"{path}:{lineno}: {exc}") from exc
    if not np.isfinite(row).all():
        raise MalformedPoseLine(f"{path}:{lineno}: non-finite value")
    return row


def _lift_3x4(row: np.ndarray) -> np.ndarray:
    m = np.eye(4)
    m[:3, :] = row.reshape(3, 4)
    return m


def read_poses(path: str | Path, calib: Calibration) -> list[Pose]:
    """Read camera-frame poses and convert them to the LiDAR frame.

    Each pose is conjugated by the extrinsic: T_velo = Tr^-1 . T_cam . Tr.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise IoFailure(f"cannot read poses {path}: {exc}") from exc
    tr = calib.tr
    tr_inv = Pose(tr).inverse().matrix
    poses = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        row = _parse_float_row(line.split(), path, lineno)
        t_cam = _lift_3x4(row)
        poses.append(Pose(tr_inv @ t_cam @ tr))
    return poses


def write_poses(poses: list[Pose], path: str | Path, calib: Calibration) -> None:
    """Inverse of :func:`read_poses`: LiDAR-frame poses back to camera-frame lines."""
    tr = calib.tr
    tr_inv = Pose(tr).inverse().matrix
    lines = []
    for pose in poses:
        t_cam = tr @ pose.matrix @ tr_inv
        lines.append(" ".join(f"{v:.17g}" for v in t_cam[:3, :].ravel()))
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write poses {path}: {exc}") from exc


def read_calib(path: str | Path) -> Calibration:
    """Extract the ``Tr:`` extrinsic from a KITTI odometry calib file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise IoFailure(f"cannot read calib {path}: {exc}") from exc
    for line in text.splitlines():
        if not line.startswith("Tr:"):
            continue
        tokens = line.split()[1:]
        if len(tokens) != 12:
            raise MalformedCalib(f"{path}: Tr line holds {len(tokens)} values, want 12")
        try:
            row = np.array([float(tok) for tok in tokens], dtype=np.float64)
        except ValueError as exc:
            raise MalformedCalib(f"{path}: {exc}") from exc
        if not np.isfinite(row).all():
            raise MalformedCalib(f"{path}: non-finite Tr value")
        return Calibration(_lift_3x4(row))
    raise MalformedCalib(f"{path}: no line starting with 'Tr:'")


def write_calib(calib: Calibration, path: str | Path) -> None:
    line = "Tr: " + " ".join(f"{v:.17g}" for v in calib.tr[:3, :].ravel())
    try:
        Path(path).write_text(line + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write calib {path}: {exc}") from exc


def classes_to_raw_labels(classes: np.ndarray) -> LabelArray:
    """Encode class ids as raw labels using one canonical semantic id per class."""
    classes = np.asarray(classes)
    lut = np.zeros(NUM_CLASSES, dtype=np.uint32)
    for c, sem in CANONICAL_SEMANTIC_ID.items():
        lut[c] = sem
    return LabelArray(raw=lut[classes])
