"""KITTI odometry file formats: velodyne scans, pose files, calibration.

KITTI velodyne coordinates are x forward, y left, z up; the package works in
x right, y down, z forward. The remap is the proper rotation
``x = -y_k, y = -z_k, z = x_k``.
"""
from __future__ import annotations

import logging
import os
from pathlib import Path

import numpy as np

from .. import kernels
from ..core import RigidMotion, check_rotation, invert_matrix, matrix_to_euler
from ..encoder import PointCloud, azimuth_deg
from ..errors import DataError, InvalidArgumentError

log = logging.getLogger(__name__)

SENSOR_FROM_KITTI = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
POSE_ORTHO_TOL = 1e-4
MAX_RINGS = 64
WRAP_THRESHOLD_DEG = 90.0


def kitti_to_sensor(xyz):
    xyz = np.asarray(xyz)
    return np.column_stack([-xyz[:, 1], -xyz[:, 2], xyz[:, 0]])


def sensor_to_kitti(xyz):
    xyz = np.asarray(xyz)
    return np.column_stack([xyz[:, 2], -xyz[:, 0], -xyz[:, 1]])


def infer_rings(xyz, max_rings=MAX_RINGS, threshold_deg=WRAP_THRESHOLD_DEG):
    """Ring index per point from emission order (sensor axes).

    Within one ring the azimuth sweeps monotonically; a jump against the
    sweep direction larger than ``threshold_deg`` starts the next ring.
    Returns ``(rings, keep)``; points past ``max_rings`` wraps are not kept.
    """
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    if len(xyz) == 0:
        return np.zeros(0, np.int64), np.zeros(0, bool)
    az = azimuth_deg(xyz[:, 0], xyz[:, 2])
    rings = kernels.ring_scan(np.ascontiguousarray(az), float(threshold_deg))
    keep = rings < max_rings
    if not keep.all():
        log.warning(
            "detected %d azimuth wraps (> %d rings); dropping %d trailing points",
            int(rings[-1]), max_rings, int((~keep).sum()),
        )
    return rings, keep


def read_scan_array(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise DataError(f"{path}: size {len(raw)} bytes is not a multiple of 16")
    return np.frombuffer(raw, dtype="<f4").reshape(-1, 4)


def load_scan(path, max_rings=MAX_RINGS) -> PointCloud:
    """Read a KITTI ``.bin`` scan into sensor axes with recovered ring indices."""
    arr = read_scan_array(path)
    if len(arr) == 0:
        log.warning("%s: empty scan", path)
        return PointCloud.empty()
    xyz = kitti_to_sensor(arr[:, :3].astype(np.float64))
    rings, keep = infer_rings(xyz, max_rings)
    intensity = np.clip(arr[:, 3].astype(np.float64), 0.0, 1.0)
    return PointCloud(xyz[keep], rings[keep], intensity[keep])


def scan_bytes(cloud: PointCloud) -> bytes:
    arr = np.empty((len(cloud), 4), dtype="<f4")
    arr[:, :3] = sensor_to_kitti(cloud.xyz)
    arr[:, 3] = cloud.intensity
    return arr.tobytes()


def save_scan(path, cloud: PointCloud):
    """Write points in emission order; ring indices are not stored (KITTI has none)."""
    Path(path).write_bytes(scan_bytes(cloud))


def load_poses(path) -> np.ndarray:
    poses = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                vals = [float(v) for v in line.split()]
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric pose entry") from None
            if len(vals) != 12:
                raise DataError(f"{path}:{lineno}: expected 12 values, got {len(vals)}")
            m = np.eye(4)
            m[:3, :] = np.reshape(vals, (3, 4))
            try:
                check_rotation(m[:3, :3], POSE_ORTHO_TOL)
            except InvalidArgumentError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            poses.append(m)
    return np.array(poses).reshape(-1, 4, 4)


def format_poses(poses) -> str:
    lines = []
    for m in np.asarray(poses).reshape(-1, 4, 4):
        lines.append(" ".join(f"{v:.9g}" for v in m[:3, :].ravel()))
    return "\n".join(lines) + ("\n" if lines else "")


def save_poses(path, poses):
    with open(path, "w", newline="\n") as fh:
        fh.write(format_poses(poses))


def load_calib(path):
    """``Tr`` (velodyne -> camera, 4x4) from a KITTI calib.txt, or None."""
    if not os.path.exists(path):
        return None
    with open(path) as fh:
        for line in fh:
            key, _, rest = line.partition(":")
            if key.strip() == "Tr":
                m = np.eye(4)
                m[:3, :] = np.reshape([float(v) for v in rest.split()], (3, 4))
                return m
    return None


def nominal_extrinsic():
    """Camera-from-velodyne transform when no calibration is available."""
    m = np.eye(4)
    m[:3, :3] = SENSOR_FROM_KITTI
    return m


def relative_motions(poses, cam_from_velo=None) -> list[RigidMotion]:
    """Frame-to-frame LiDAR motions (sensor axes) from absolute camera poses.

    motion[k] = inv(pose[k]) @ pose[k+1], moved from the camera frame into the
    velodyne frame with ``cam_from_velo`` and then remapped to sensor axes.
    """
    poses = np.asarray(poses, dtype=float).reshape(-1, 4, 4)
    if len(poses) < 2:
        raise DataError(f"need at least 2 poses, got {len(poses)}")
    for k, p in enumerate(poses):
        try:
            check_rotation(p[:3, :3], POSE_ORTHO_TOL)
        except InvalidArgumentError as exc:
            raise DataError(f"pose line {k + 1}: {exc}") from None
    if cam_from_velo is None:
        conj = None
    else:
        a = np.eye(4)
        a[:3, :3] = SENSOR_FROM_KITTI
        left = a @ invert_matrix(cam_from_velo)
        right = np.asarray(cam_from_velo) @ invert_matrix(a)
        conj = (left, right)
    out = []
    for k in range(len(poses) - 1):
        m = invert_matrix(poses[k]) @ poses[k + 1]
        if conj is not None:
            m = conj[0] @ m @ conj[1]
        # re-orthonormalise away the 9-digit rounding of pose files
        u, _, vt = np.linalg.svd(m[:3, :3])
        m[:3, :3] = u @ vt
        out.append(matrix_to_euler(m))
    return out


def sequence_paths(root, seq):
    root = Path(root)
    scans = sorted((root / "sequences" / seq / "velodyne").glob("*.bin"))
    return {
        "scans": scans,
        "poses": root / "poses" / f"{seq}.txt",
        "calib": root / "sequences" / seq / "calib.txt",
    }
