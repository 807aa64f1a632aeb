"""Polar bird's-eye-view projection and residual motion features.

A scan is binned into an H x W grid (H radial rings, W angular sectors by
default).  Per temporal window, each occupied cell carries the span
max z - min z of its in-range points; the residual between the two window
images is replicated into the motion channels with opposite signs, so a
cell occupied in exactly one window lights up positively on that window's
channels.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import IoFailure, ShapeMismatch
from .kitti_io import CLASS_UNLABELED, NUM_CLASSES, PointCloud

AGGREGATES = ("max", "mean", "latest")


@dataclass(frozen=True)
class BevGrid:
    """Grid geometry for the projection.

    ``n_radial`` / ``n_angular`` double as n_x / n_y in cartesian mode.
    The z range is exclusive on both ends.
    """

    mode: str = "polar"
    n_radial: int = 32
    n_angular: int = 360
    r_max: float = 50.0
    z_min: float = -4.0
    z_max: float = 2.0

    def __post_init__(self) -> None:
        if self.mode not in ("polar", "cartesian"):
            raise ValueError(f"unknown grid mode {self.mode!r}")
        if self.n_radial < 1 or self.n_angular < 1:
            raise ValueError("grid dimensions must be >= 1")
        if self.r_max <= 0:
            raise ValueError("r_max must be positive")
        if self.z_min >= self.z_max:
            raise ValueError("z_min must be below z_max")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_radial, self.n_angular)


@dataclass(frozen=True)
class CellIndexMap:
    """Point-to-cell assignment for one projected cloud.

    ``flat`` holds u * W + v per point, or -1 for points outside the radial
    or z range.
    """

    shape: tuple[int, int]
    flat: np.ndarray  # (N,) int64

    @property
    def assigned(self) -> np.ndarray:
        return self.flat >= 0

    @property
    def point_to_cell(self) -> np.ndarray:
        """(N, 2) array of (u, v), -1 rows for unassigned points."""
        _, w = self.shape
        uv = np.full((self.flat.shape[0], 2), -1, dtype=np.int64)
        mask = self.assigned
        uv[mask, 0] = self.flat[mask] // w
        uv[mask, 1] = self.flat[mask] % w
        return uv

    def cell_to_points(self) -> dict[tuple[int, int], np.ndarray]:
        """Map (u, v) -> indices of the points assigned there."""
        _, w = self.shape
        mask = self.assigned
        idx = np.nonzero(mask)[0]
        order = np.argsort(self.flat[idx], kind="stable")
        idx = idx[order]
        cells = self.flat[idx]
        out: dict[tuple[int, int], np.ndarray] = {}
        for start, stop in zip(*_runs(cells)):
            c = int(cells[start])
            out[(c // w, c % w)] = idx[start:stop]
        return out


def _runs(sorted_vals: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if sorted_vals.size == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    change = np.nonzero(np.diff(sorted_vals))[0] + 1
    starts = np.concatenate(([0], change))
    stops = np.concatenate((change, [sorted_vals.size]))
    return starts, stops


@dataclass(frozen=True)
class HeightImage:
    """Per-cell height span (max z - min z); zero where unoccupied."""

    values: np.ndarray    # (H, W) float64, >= 0
    occupancy: np.ndarray  # (H, W) bool


@dataclass(frozen=True)
class MotionTensor:
    """N motion channels; the first n2 carry I1 - I2, the rest I2 - I1.

    Optional appearance channels (raw per-frame height images) may follow
    after the N residual channels.
    """

    channels: np.ndarray  # (C, H, W) float64, C >= N
    n2: int
    n_residual: int

    def __post_init__(self) -> None:
        if self.channels.ndim != 3:
            raise ValueError("channels must be (C, H, W)")
        if not (1 <= self.n2 < self.n_residual):
            raise ValueError("need 1 <= n2 < n_residual")
        if self.channels.shape[0] < self.n_residual:
            raise ValueError("channel count below residual channel count")


@dataclass(frozen=True)
class CellLabelGrid:
    """Majority class per occupied cell; invalid (empty) cells are 0."""

    labels: np.ndarray  # (H, W) uint8
    valid: np.ndarray   # (H, W) bool


def project_to_cells(cloud: PointCloud, grid: BevGrid) -> CellIndexMap:
    """Assign each point a grid cell, or none if out of range.

    Polar mode: u = floor(r / r_max * n_radial) with r = sqrt(x^2 + y^2),
    v = floor((atan2(y, x) + pi) / 2pi * n_angular) with the +pi edge
    clamped into the last sector.  Points with r >= r_max or z outside
    (z_min, z_max) stay unassigned.
    """
    xyz = cloud.xyz.astype(np.float64, copy=False)
    x, y, z = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    h, w = grid.shape
    if grid.mode == "polar":
        r = np.hypot(x, y)
        in_range = (r < grid.r_max) & (z > grid.z_min) & (z < grid.z_max)
        u = np.floor(r / grid.r_max * grid.n_radial).astype(np.int64)
        v = np.floor(
            (np.arctan2(y, x) + np.pi) / (2.0 * np.pi) * grid.n_angular
        ).astype(np.int64)
        np.minimum(v, grid.n_angular - 1, out=v)
    else:
        in_range = (
            (x > -grid.r_max)
            & (x < grid.r_max)
            & (y > -grid.r_max)
            & (y < grid.r_max)
            & (z > grid.z_min)
            & (z < grid.z_max)
        )
        u = np.floor((x + grid.r_max) / (2.0 * grid.r_max) * h).astype(np.int64)
        v = np.floor((y + grid.r_max) / (2.0 * grid.r_max) * w).astype(np.int64)
    flat = np.where(in_range, u * w + v, -1)
    return CellIndexMap(shape=grid.shape, flat=flat)


def height_image(cells: CellIndexMap, cloud: PointCloud, grid: BevGrid) -> HeightImage:
    """Height span per occupied cell over the assigned points."""
    if cells.flat.shape[0] != len(cloud):
        raise ShapeMismatch("cell map and cloud disagree in point count")
    h, w = grid.shape
    n_cells = h * w
    z = cloud.xyz[:, 2].astype(np.float64, copy=False)
    mask = cells.assigned
    flat = cells.flat[mask]
    zc = z[mask]
    zmax = np.full(n_cells, -np.inf)
    zmin = np.full(n_cells, np.inf)
    np.maximum.at(zmax, flat, zc)
    np.minimum.at(zmin, flat, zc)
    occupied = np.isfinite(zmax)
    values = np.zeros(n_cells)
    values[occupied] = zmax[occupied] - zmin[occupied]
    return HeightImage(
        values=values.reshape(h, w), occupancy=occupied.reshape(h, w)
    )


def _aggregate_window(images: list[HeightImage], how: str) -> tuple[np.ndarray, np.ndarray]:
    """Pool per-frame height images into one window image.

    ``images[0]`` is the newest frame of the window.  Occupancy is the
    union; unoccupied cells pool to 0.
    """
    if how not in AGGREGATES:
        raise ValueError(f"unknown aggregate {how!r}")
    values = np.stack([im.values for im in images])
    occ = np.stack([im.occupancy for im in images])
    any_occ = occ.any(axis=0)
    if how == "max":
        pooled = np.where(occ, values, -np.inf).max(axis=0)
        pooled = np.where(any_occ, pooled, 0.0)
    elif how == "mean":
        counts = occ.sum(axis=0)
        pooled = np.where(occ, values, 0.0).sum(axis=0)
        pooled = np.divide(pooled, counts, out=np.zeros_like(pooled), where=counts > 0)
    else:  # latest occupied frame wins
        pooled = np.zeros_like(values[0])
        for vals, o in zip(values[::-1], occ[::-1]):
            pooled = np.where(o, vals, pooled)
    return pooled, any_occ


def motion_residuals(
    q1: list[HeightImage],
    q2: list[HeightImage],
    aggregate: str = "max",
    per_frame: bool = False,
) -> MotionTensor:
    """Build the N = len(q1) + len(q2) motion channels from two windows.

    Default (window-level) form: one difference image I1 - I2 is shared by
    all channels of the newer window and its negation by the older window's
    channels.  With ``per_frame`` each channel uses its own frame's height
    image in place of the pooled window image on its side.
    """
    if not q1 or not q2:
        raise ShapeMismatch("both windows need at least one frame")
    shape = q1[0].values.shape
    for im in (*q1, *q2):
        if im.values.shape != shape:
            raise ShapeMismatch("window images disagree in shape")
    n2 = len(q1)
    n = n2 + len(q2)
    i1, _ = _aggregate_window(q1, aggregate)
    i2, _ = _aggregate_window(q2, aggregate)
    channels = np.empty((n, *shape))
    if per_frame:
        for k, im in enumerate(q1):
            channels[k] = np.where(im.occupancy, im.values, 0.0) - i2
        for k, im in enumerate(q2):
            channels[n2 + k] = np.where(im.occupancy, im.values, 0.0) - i1
    else:
        diff = i1 - i2
        channels[:n2] = diff
        channels[n2:] = -diff
    return MotionTensor(channels=channels, n2=n2, n_residual=n)


def append_appearance(tensor: MotionTensor, images: list[HeightImage]) -> MotionTensor:
    """Concatenate raw per-frame height values after the residual channels."""
    extra = np.stack([im.values for im in images])
    if extra.shape[1:] != tensor.channels.shape[1:]:
        raise ShapeMismatch("appearance images disagree with residual shape")
    return MotionTensor(
        channels=np.concatenate([tensor.channels, extra], axis=0),
        n2=tensor.n2,
        n_residual=tensor.n_residual,
    )


def cell_labels(
    cells: CellIndexMap, point_classes: np.ndarray, grid: BevGrid
) -> CellLabelGrid:
    """Majority class per occupied cell.

    Count ties break by priority moving > movable > static > unlabeled.
    Empty cells get label 0 and valid=False.
    """
    point_classes = np.asarray(point_classes)
    if point_classes.shape[0] != cells.flat.shape[0]:
        raise ShapeMismatch("point classes and cell map disagree in length")
    h, w = grid.shape
    counts = np.zeros((h * w, NUM_CLASSES), dtype=np.int64)
    mask = cells.assigned
    np.add.at(counts, (cells.flat[mask], point_classes[mask]), 1)
    # argmax over reversed class order = highest class id among tied maxima
    labels = (NUM_CLASSES - 1 - np.argmax(counts[:, ::-1], axis=1)).astype(np.uint8)
    valid = counts.sum(axis=1) > 0
    labels[~valid] = CLASS_UNLABELED
    return CellLabelGrid(labels=labels.reshape(h, w), valid=valid.reshape(h, w))


def back_project(cell_preds: np.ndarray, cells: CellIndexMap) -> np.ndarray:
    """Give every assigned point its cell's predicted class; unassigned get 0."""
    cell_preds = np.asarray(cell_preds)
    if cell_preds.shape != cells.shape:
        raise ShapeMismatch(
            f"prediction grid {cell_preds.shape} vs cell map {cells.shape}"
        )
    out = np.zeros(cells.flat.shape[0], dtype=cell_preds.dtype)
    mask = cells.assigned
    out[mask] = cell_preds.ravel()[cells.flat[mask]]
    return out


def write_pgm(values: np.ndarray, path: str | Path) -> None:
    """Export a 2D array as an 8-bit grayscale PGM (P5).

    Linear min-max normalization; the range used is recorded in a
    ``<path>.norm`` sidecar so the image is invertible.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError("render input must be 2D")
    lo = float(values.min()) if values.size else 0.0
    hi = float(values.max()) if values.size else 0.0
    if hi > lo:
        scaled = (values - lo) / (hi - lo) * 255.0
    else:
        scaled = np.zeros_like(values)
    data = np.round(scaled).astype(np.uint8)
    h, w = values.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    path = Path(path)
    try:
        path.write_bytes(header + data.tobytes())
        Path(str(path) + ".norm").write_text(f"min={lo:.17g}\nmax={hi:.17g}\n")
    except OSError as exc:
        raise IoFailure(f"cannot write render {path}: {exc}") from exc
