"""Ray-cast simulator for a rotating 64-beam LiDAR in a world of boxes.

World coordinates use the sensor convention (x right, y down, z forward) of
the first frame; the ground is the plane ``y = ground_y``. Each scan casts one
ray per (ring, azimuth column) through the column centre, ring 0 being the
highest beam, and emits points ring by ring with increasing azimuth.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .. import kernels
from ..core import RigidMotion, euler_to_matrix, integrate
from ..encoder import PointCloud
from ..errors import DataError

log = logging.getLogger(__name__)


@dataclass
class SyntheticWorld:
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 6)))  # cx cy cz sx sy sz
    ground_y: float = 1.73
    rows: int = 64
    fov_up: float = 2.0
    fov_down: float = -24.8
    azimuth_step: float = 1.0
    max_range: float = 120.0
    intensity_noise: float = 0.05
    seed: int = 0
    # trajectory parameters
    trajectory: str = "drive"
    speed: float = 1.0
    speed_min: float = 0.0
    speed_max: float = 1.5
    yaw_rate: float = 0.0  # degrees per frame (constant mode)
    yaw_max: float = 2.0  # degrees per frame (drive mode)
    tilt_max: float = 0.0  # degrees per frame on x and z (drive mode)
    smoothing: float = 0.9

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=float).reshape(-1, 6)
        if np.any(self.boxes[:, 3:] <= 0):
            raise DataError("box sizes must be positive")
        if self.rows < 1 or self.azimuth_step <= 0 or self.max_range <= 0:
            raise DataError("degenerate beam geometry")

    @property
    def cols(self):
        return int(round(360.0 / self.azimuth_step))

    def box_bounds(self):
        c, s = self.boxes[:, :3], self.boxes[:, 3:] / 2
        return np.ascontiguousarray(c - s), np.ascontiguousarray(c + s)

    def elevations(self):
        """Beam elevation per ring in radians, ring 0 highest."""
        if self.rows == 1:
            return np.array([math.radians(self.fov_up)])
        return np.radians(np.linspace(self.fov_up, self.fov_down, self.rows))

    def materials(self):
        """Per-primitive base intensity (boxes first, then the ground)."""
        rng = np.random.default_rng([self.seed, 7])
        return rng.uniform(0.2, 0.9, size=len(self.boxes) + 1)

    def ray_directions(self):
        """(rows * cols, 3) unit directions in the sensor frame, emission order."""
        el = self.elevations()[:, None]
        az = np.radians((np.arange(self.cols) + 0.5) * self.azimuth_step)[None, :]
        d = np.stack(
            np.broadcast_arrays(np.cos(el) * np.cos(az), -np.sin(el), np.cos(el) * np.sin(az)),
            axis=-1,
        )
        return d.reshape(-1, 3)


# ---------------------------------------------------------------------------
# world config: key = value lines plus repeated "box = cx cy cz sx sy sz"

_FLOAT_KEYS = {
    "ground_y", "fov_up", "fov_down", "azimuth_step", "max_range", "intensity_noise",
    "speed", "speed_min", "speed_max", "yaw_rate", "yaw_max", "tilt_max", "smoothing",
}
_INT_KEYS = {"rows", "seed"}


def parse_world(text: str, source="<world>") -> SyntheticWorld:
    kw = {}
    boxes = []
    enclosure = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise DataError(f"{source}:{lineno}: expected key = value")
        try:
            if key == "box":
                vals = [float(v) for v in value.split()]
                if len(vals) != 6:
                    raise DataError(f"{source}:{lineno}: box needs 6 numbers (cx cy cz sx sy sz)")
                boxes.append(vals)
            elif key == "enclosure":
                enclosure = [float(v) for v in value.split()]
            elif key in _FLOAT_KEYS:
                kw[key] = float(value)
            elif key in _INT_KEYS:
                kw[key] = int(value)
            elif key == "trajectory":
                if value not in ("drive", "constant", "stationary"):
                    raise DataError(f"{source}:{lineno}: unknown trajectory {value!r}")
                kw[key] = value
            else:
                raise DataError(f"{source}:{lineno}: unknown key {key!r}")
        except DataError:
            raise
        except ValueError:
            raise DataError(f"{source}:{lineno}: bad value for {key!r}: {value!r}") from None
    world = SyntheticWorld(boxes=np.array(boxes).reshape(-1, 6), **kw)
    if enclosure:
        world.boxes = np.vstack([world.boxes, enclosure_boxes(*enclosure, ground_y=world.ground_y)])
    return world


def format_world(world: SyntheticWorld) -> str:
    lines = []
    for key in sorted(_FLOAT_KEYS | _INT_KEYS | {"trajectory"}):
        lines.append(f"{key} = {getattr(world, key)!r}".replace("'", ""))
    for b in world.boxes:
        lines.append("box = " + " ".join(f"{v:.17g}" for v in b))
    return "\n".join(lines) + "\n"


def enclosure_boxes(half_size, height=30.0, ground_y=1.73, thickness=2.0):
    """Four walls around the origin so every beam returns something."""
    cy = ground_y - height / 2
    h = half_size + thickness / 2
    span = 2 * half_size + 2 * thickness
    return np.array(
        [
            [h, cy, 0.0, thickness, height, span],
            [-h, cy, 0.0, thickness, height, span],
            [0.0, cy, h, span, height, thickness],
            [0.0, cy, -h, span, height, thickness],
        ]
    )


def random_world(seed, n_boxes=80, extent=60.0, avoid=(), clearance=4.0, reach=None, **kw) -> SyntheticWorld:
    """Boxes of random size scattered over ``[-extent, extent]^2`` inside walls.

    Boxes whose footprint comes within ``clearance`` of any point in ``avoid``
    (an (n, 3) array of sensor positions) are rejected, and so are boxes
    farther than ``reach`` from all of them when ``reach`` is given, which
    lines the driven paths with buildings like a street.
    """
    rng = np.random.default_rng([seed, 1])
    ground_y = kw.get("ground_y", 1.73)
    avoid = np.asarray(avoid, dtype=float).reshape(-1, 3)
    boxes = []
    tries = 0
    while len(boxes) < n_boxes and tries < n_boxes * 50:
        tries += 1
        sx, sz = rng.uniform(1.0, 8.0, size=2)
        sy = rng.uniform(1.0, 10.0)
        cx, cz = rng.uniform(-extent, extent, size=2)
        if len(avoid):
            dx = np.maximum(np.abs(avoid[:, 0] - cx) - sx / 2, 0)
            dz = np.maximum(np.abs(avoid[:, 2] - cz) - sz / 2, 0)
            gap = np.min(np.hypot(dx, dz))
            if gap < clearance or (reach is not None and gap > reach):
                continue
        # boxes sit on the ground (y down)
        boxes.append([cx, ground_y - sy / 2, cz, sx, sy, sz])
    boxes = np.array(boxes).reshape(-1, 6)
    walls = enclosure_boxes(extent + 10.0, ground_y=ground_y)
    return SyntheticWorld(boxes=np.vstack([boxes, walls]), seed=seed, **kw)


# ---------------------------------------------------------------------------


def drive_motions(world: SyntheticWorld, frames: int, seed=None) -> list[RigidMotion]:
    """Per-frame motions for ``frames`` scans (``frames - 1`` motions)."""
    n = max(frames - 1, 0)
    if world.trajectory == "stationary":
        return [RigidMotion() for _ in range(n)]
    if world.trajectory == "constant":
        w = math.radians(world.yaw_rate)
        v = world.speed
        return [RigidMotion(v * math.sin(w / 2), 0.0, v * math.cos(w / 2), 0.0, w, 0.0) for _ in range(n)]
    rng = np.random.default_rng([world.seed if seed is None else seed, 2])
    a = world.smoothing
    lo, hi = world.speed_min, world.speed_max
    v = rng.uniform(lo, hi)
    yaw_lim = math.radians(world.yaw_max)
    tilt_lim = math.radians(world.tilt_max)
    w = rng.uniform(-yaw_lim, yaw_lim)
    tilt = np.zeros(2)
    out = []
    for _ in range(n):
        v = float(np.clip(a * v + (1 - a) * rng.uniform(lo, hi) + 0.1 * (hi - lo) * rng.normal(), lo, hi))
        w = float(np.clip(a * w + (1 - a) * rng.uniform(-yaw_lim, yaw_lim) + 0.1 * yaw_lim * rng.normal(), -yaw_lim, yaw_lim))
        if tilt_lim > 0:
            tilt = np.clip(0.5 * tilt + rng.uniform(-tilt_lim, tilt_lim, size=2), -tilt_lim, tilt_lim)
        out.append(RigidMotion(v * math.sin(w / 2), 0.0, v * math.cos(w / 2), float(tilt[0]), w, float(tilt[1])))
    return out


def scan_at(world: SyntheticWorld, pose, frame_index=0, dirs=None, bounds=None) -> PointCloud:
    """Cast every beam from ``pose`` (world-from-sensor, 4x4)."""
    dirs = world.ray_directions() if dirs is None else dirs
    lo, hi = world.box_bounds() if bounds is None else bounds
    pose = np.asarray(pose, dtype=float)
    origin = np.ascontiguousarray(pose[:3, 3])
    dirs_w = np.ascontiguousarray(dirs @ pose[:3, :3].T)
    t, hit = kernels.ray_cast(origin, dirs_w, lo, hi, float(world.ground_y), float(world.max_range))
    ok = hit >= 0
    if not ok.any():
        log.warning("frame %d: no beam hit any geometry", frame_index)
        return PointCloud.empty()
    rng = np.random.default_rng([world.seed, 3, frame_index])
    noise = rng.uniform(-world.intensity_noise, world.intensity_noise, size=len(dirs))
    intensity = np.clip(world.materials()[np.maximum(hit, 0)] + noise, 0.0, 1.0)
    rings = np.repeat(np.arange(world.rows), world.cols)
    xyz = t[ok, None] * dirs[ok]
    return PointCloud(xyz, rings[ok], intensity[ok])


def simulate(world: SyntheticWorld, frames: int, motions=None, start_pose=None, seed=None):
    """Scans and exact ground-truth motions for ``frames`` consecutive frames.

    Returns ``(scans, motions, poses)``; ``poses`` are world-from-sensor.
    """
    if motions is None:
        motions = drive_motions(world, frames, seed)
    if len(motions) != max(frames - 1, 0):
        raise DataError(f"{frames} frames need {frames - 1} motions, got {len(motions)}")
    traj = integrate(motions)
    poses = traj.poses
    if start_pose is not None:
        poses = np.asarray(start_pose) @ poses
    dirs = world.ray_directions()
    bounds = world.box_bounds()
    scans = [scan_at(world, p, k, dirs, bounds) for k, p in enumerate(poses)]
    return scans, list(motions), poses


def with_grid(world: SyntheticWorld, azimuth_step: float) -> SyntheticWorld:
    return replace(world, azimuth_step=azimuth_step)


def street_runs(world: SyntheticWorld, frame_counts, seed=0, box_area=50.0, reach=15.0, clearance=2.5, spread=20.0):
    """Several drives through one shared world of boxes lining their paths.

    Run ``i`` has ``frame_counts[i]`` frames and starts at a random pose within
    ``spread`` meters of the origin (the first run starts at the origin). The
    world's boxes are replaced by about one box per ``box_area`` square meters
    of the band within ``reach`` of the paths. Returns ``(world, runs)`` with
    each run a dict of ``clouds``, ``motions`` and ``poses``.
    """
    rng = np.random.default_rng([seed, 17])
    plans = []
    for i, frames in enumerate(frame_counts):
        motions = drive_motions(world, frames, seed=seed * 1000 + i)
        start = np.eye(4)
        if i > 0:
            start = euler_to_matrix(
                RigidMotion(rng.uniform(-spread, spread), 0.0, rng.uniform(-spread, spread), 0.0, rng.uniform(-math.pi, math.pi), 0.0)
            )
        plans.append((motions, start @ integrate(motions).poses))
    path = np.concatenate([p[:, :3, 3] for _, p in plans])
    length = sum(float(np.sum(np.linalg.norm(np.diff(p[:, :3, 3], axis=0), axis=1))) for _, p in plans)
    extent = float(np.abs(path[:, [0, 2]]).max()) + reach + 10.0
    n_boxes = max(int(length * 2 * reach / box_area), 1)
    boxes = random_world(seed, n_boxes, extent, avoid=path, clearance=clearance, reach=reach, ground_y=world.ground_y).boxes
    world = replace(world, boxes=boxes)
    runs = []
    for motions, poses in plans:
        scans, motions, poses = simulate(world, len(poses), motions=motions, start_pose=poses[0])
        runs.append({"clouds": scans, "motions": motions, "poses": poses})
    return world, runs
