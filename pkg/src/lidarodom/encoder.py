"""Sparse LiDAR scans to dense (rows x cols x 3) matrices.

One row per laser ring, one column per azimuth sector. Each occupied cell
holds the mean (height, planar depth, intensity) of the points that fell in
it; empty cells are filled by circular linear interpolation along the ring
and rows that saw no return copy the nearest populated ring. Height is then
divided by ``H`` and depth replaced by its natural log.
"""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import kernels
from .core import AXIS_ROTATIONS
from .errors import EmptyFrameError, EncodingInvariantError, InvalidArgumentError

log = logging.getLogger(__name__)

HEIGHT_SCALE = 3.0
CHANNELS = ("height", "log_depth", "intensity")


class LidarPoint(NamedTuple):
    x: float
    y: float
    z: float
    ring: int
    intensity: float


@dataclass
class PointCloud:
    """One sensor revolution stored column-wise.

    xyz is (n, 3) in the sensor frame (x right, y down, z forward), ring is an
    integer beam index, intensity lies in [0, 1].
    """

    xyz: np.ndarray
    ring: np.ndarray
    intensity: np.ndarray

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        self.ring = np.asarray(self.ring, dtype=np.int64).reshape(-1)
        self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
        n = len(self.xyz)
        if len(self.ring) != n or len(self.intensity) != n:
            raise InvalidArgumentError("xyz, ring and intensity must have equal length")

    def __len__(self):
        return len(self.xyz)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros(0, np.int64), np.zeros(0))

    @classmethod
    def from_points(cls, points):
        pts = [LidarPoint(*p) for p in points]
        if not pts:
            return cls.empty()
        return cls(
            [(p.x, p.y, p.z) for p in pts],
            [p.ring for p in pts],
            [p.intensity for p in pts],
        )

    def points(self):
        for (x, y, z), r, i in zip(self.xyz, self.ring, self.intensity):
            yield LidarPoint(float(x), float(y), float(z), int(r), float(i))

    def take(self, index) -> PointCloud:
        return PointCloud(self.xyz[index], self.ring[index], self.intensity[index])


@dataclass(frozen=True)
class GridSpec:
    rows: int = 64
    azimuth_step: float = 1.0

    def __post_init__(self):
        if self.rows <= 0:
            raise InvalidArgumentError(f"rows must be positive, got {self.rows}")
        ratio = 360.0 / self.azimuth_step
        if self.azimuth_step <= 0 or abs(ratio - round(ratio)) > 1e-9:
            raise InvalidArgumentError(f"360 is not divisible by azimuth_step={self.azimuth_step}")

    @property
    def cols(self) -> int:
        return int(round(360.0 / self.azimuth_step))

    @property
    def shape(self):
        return (self.rows, self.cols)

    @classmethod
    def regression(cls):
        return cls(64, 1.0)

    @classmethod
    def classification(cls):
        return cls(64, 0.2)

    def column_center(self, col) -> np.ndarray:
        """Azimuth (radians) at the middle of column ``col``."""
        return np.deg2rad((np.asarray(col) + 0.5) * self.azimuth_step)


@dataclass
class EncodedFrame:
    values: np.ndarray  # (rows, cols, 3)
    mask: np.ndarray  # (rows, cols) bool, original occupancy
    grid: GridSpec = field(default_factory=GridSpec)
    dropped: int = 0
    normalized: bool = True
    height_scale: float = HEIGHT_SCALE

    @property
    def shape(self):
        return self.values.shape

    def denormalized(self) -> np.ndarray:
        """Channel values in meters (height, planar depth) plus intensity."""
        if not self.normalized:
            return self.values.copy()
        out = self.values.copy()
        out[..., 0] *= self.height_scale
        out[..., 1] = np.exp(out[..., 1])
        return out

    def channels_first(self, dtype=np.float32) -> np.ndarray:
        return np.ascontiguousarray(self.values.transpose(2, 0, 1), dtype=dtype)

    def roll_columns(self, k: int) -> EncodedFrame:
        return EncodedFrame(
            np.roll(self.values, k, axis=1),
            np.roll(self.mask, k, axis=1),
            self.grid,
            self.dropped,
            self.normalized,
            self.height_scale,
        )


# ---------------------------------------------------------------------------


def azimuth_deg(x, z):
    """Azimuth in [0, 360) degrees, measured from +x towards +z."""
    a = np.degrees(np.arctan2(z, x)) % 360.0
    return np.where(a >= 360.0, 0.0, a)


def _columns(az_deg, grid: GridSpec):
    col = np.floor(az_deg * grid.cols / 360.0).astype(np.int64)
    return np.minimum(col, grid.cols - 1)


def bin_assign(p: LidarPoint, grid: GridSpec):
    p = LidarPoint(*p)
    if not 0 <= p.ring < grid.rows:
        raise InvalidArgumentError(f"ring {p.ring} outside [0, {grid.rows})")
    if not all(math.isfinite(v) for v in (p.x, p.y, p.z)):
        raise InvalidArgumentError("non-finite point coordinates")
    if math.hypot(p.x, p.z) == 0.0:
        raise InvalidArgumentError("point on the sensor axis has no azimuth")
    col = int(_columns(azimuth_deg(p.x, p.z), grid))
    return int(p.ring), col


def bin_assign_many(cloud: PointCloud, grid: GridSpec):
    """Vectorised bin assignment; returns (row, col, keep) with invalid points dropped."""
    xyz = cloud.xyz
    planar = np.hypot(xyz[:, 0], xyz[:, 2])
    keep = (
        (cloud.ring >= 0)
        & (cloud.ring < grid.rows)
        & (planar > 0)
        & np.all(np.isfinite(xyz), axis=1)
        & np.isfinite(cloud.intensity)
    )
    x, z = xyz[keep, 0], xyz[keep, 2]
    return cloud.ring[keep], _columns(azimuth_deg(x, z), grid), keep


def point_features(cloud: PointCloud) -> np.ndarray:
    """Per-point (height, planar depth, intensity)."""
    xyz = cloud.xyz
    return np.column_stack(
        [xyz[:, 1], np.hypot(xyz[:, 0], xyz[:, 2]), np.clip(cloud.intensity, 0.0, 1.0)]
    )


def bin_aggregate(points) -> np.ndarray:
    """Mean (height, planar depth, intensity) of one bin's points."""
    cloud = points if isinstance(points, PointCloud) else PointCloud.from_points(points)
    if len(cloud) == 0:
        raise EmptyFrameError("cannot aggregate an empty bin")
    return point_features(cloud).mean(axis=0)


def aggregate(cloud: PointCloud, grid: GridSpec):
    """Bin means for the whole cloud: (values, mask, dropped), values unfilled."""
    row, col, keep = bin_assign_many(cloud, grid)
    dropped = int(len(cloud) - keep.sum())
    if dropped:
        log.debug("dropped %d points outside the ring range or on the sensor axis", dropped)
    feats = point_features(cloud)[keep]
    n_bins = grid.rows * grid.cols
    sums, counts = kernels.bin_accumulate(row * grid.cols + col, feats, n_bins)
    mask = counts > 0
    values = np.zeros((n_bins, 3))
    values[mask] = sums[mask] / counts[mask, None]
    return values.reshape(grid.rows, grid.cols, 3), mask.reshape(grid.shape), dropped


def interpolate_empty(frame: EncodedFrame) -> EncodedFrame:
    if not frame.mask.any():
        raise EmptyFrameError("frame has no occupied bins")
    filled = kernels.interpolate_rows(np.ascontiguousarray(frame.values, dtype=np.float64), frame.mask)
    return EncodedFrame(filled, frame.mask.copy(), frame.grid, frame.dropped, frame.normalized, frame.height_scale)


def normalize(frame: EncodedFrame, height_scale: float = HEIGHT_SCALE) -> EncodedFrame:
    v = frame.values
    if np.any(v[..., 1] <= 0):
        bad = np.argwhere(v[..., 1] <= 0)[0]
        raise EncodingInvariantError(f"nonpositive depth at cell (row={bad[0]}, col={bad[1]})")
    out = np.empty_like(v, dtype=np.float64)
    out[..., 0] = v[..., 0] / height_scale
    out[..., 1] = np.log(v[..., 1])
    out[..., 2] = v[..., 2]
    return EncodedFrame(out, frame.mask.copy(), frame.grid, frame.dropped, True, height_scale)


def encode(cloud: PointCloud, grid: GridSpec = GridSpec(), height_scale: float = HEIGHT_SCALE) -> EncodedFrame:
    if len(cloud) == 0:
        raise EmptyFrameError("cannot encode an empty cloud")
    values, mask, dropped = aggregate(cloud, grid)
    if not mask.any():
        raise EmptyFrameError(f"all {len(cloud)} points were dropped at ingest")
    raw = EncodedFrame(values, mask, grid, dropped, normalized=False, height_scale=height_scale)
    return normalize(interpolate_empty(raw), height_scale)


def rotate_cloud(cloud: PointCloud, axis: str, angle: float) -> PointCloud:
    if axis not in AXIS_ROTATIONS:
        raise InvalidArgumentError(f"axis must be one of x, y, z, got {axis!r}")
    if not math.isfinite(angle):
        raise InvalidArgumentError("rotation angle must be finite")
    r = AXIS_ROTATIONS[axis](angle)
    return PointCloud(cloud.xyz @ r.T, cloud.ring.copy(), cloud.intensity.copy())


def invert_cell(frame: EncodedFrame, row: int, col: int) -> LidarPoint:
    """Representative point of an occupied cell (column-center azimuth)."""
    h, d, i = frame.denormalized()[row, col]
    az = float(frame.grid.column_center(col))
    return LidarPoint(d * math.cos(az), h, d * math.sin(az), row, i)


# ---------------------------------------------------------------------------
# debug dump: "ENCF", u32 rows, u32 cols, float32 triples, mask bytes

_ENCF_HEADER = struct.Struct("<4sII")


def dump_frame(frame: EncodedFrame) -> bytes:
    rows, cols, _ = frame.values.shape
    return (
        _ENCF_HEADER.pack(b"ENCF", rows, cols)
        + np.ascontiguousarray(frame.values, dtype="<f4").tobytes()
        + np.ascontiguousarray(frame.mask, dtype=np.uint8).tobytes()
    )


def load_frame(buf: bytes, azimuth_step: float | None = None) -> EncodedFrame:
    if len(buf) < _ENCF_HEADER.size:
        raise InvalidArgumentError("truncated ENCF header")
    magic, rows, cols = _ENCF_HEADER.unpack_from(buf)
    if magic != b"ENCF":
        raise InvalidArgumentError(f"bad magic {magic!r}")
    n = rows * cols
    expected = _ENCF_HEADER.size + n * 12 + n
    if len(buf) != expected:
        raise InvalidArgumentError(f"ENCF payload is {len(buf)} bytes, expected {expected}")
    off = _ENCF_HEADER.size
    values = np.frombuffer(buf, dtype="<f4", count=n * 3, offset=off).reshape(rows, cols, 3)
    mask = np.frombuffer(buf, dtype=np.uint8, count=n, offset=off + n * 12).reshape(rows, cols)
    grid = GridSpec(rows, azimuth_step if azimuth_step else 360.0 / cols)
    return EncodedFrame(values.astype(np.float64), mask.astype(bool), grid)
