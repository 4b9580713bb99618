"""Rigid-motion algebra and trajectory composition.

Frames follow the sensor convention used throughout the package: x right,
y down, z forward. Rotations use fixed axes applied x first, then y, then z,
so the rotation block of a motion is ``Rz(rz) @ Ry(ry) @ Rx(rx)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateOrientationError, InvalidArgumentError

GIMBAL_MARGIN = 1e-6
ORTHO_TOL = 1e-6


def rot_x(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


AXIS_ROTATIONS = {"x": rot_x, "y": rot_y, "z": rot_z}


@dataclass(frozen=True)
class RigidMotion:
    """6DoF frame-to-frame motion: translation in meters, rotation in radians."""

    tx: float = 0.0
    ty: float = 0.0
    tz: float = 0.0
    rx: float = 0.0
    ry: float = 0.0
    rz: float = 0.0

    @classmethod
    def from_vector(cls, v) -> RigidMotion:
        v = [float(a) for a in v]
        if len(v) != 6:
            raise InvalidArgumentError(f"expected 6 motion parameters, got {len(v)}")
        return cls(*v)

    @classmethod
    def identity(cls) -> RigidMotion:
        return cls()

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tz])

    @property
    def rotation(self) -> np.ndarray:
        return np.array([self.rx, self.ry, self.rz])

    def as_vector(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tz, self.rx, self.ry, self.rz])

    def to_matrix(self) -> np.ndarray:
        return euler_to_matrix(self)

    @classmethod
    def from_matrix(cls, m) -> RigidMotion:
        return matrix_to_euler(m)

    def compose(self, other: RigidMotion) -> RigidMotion:
        return compose(self, other)

    def inverse(self) -> RigidMotion:
        return invert(self)


def euler_to_matrix(m: RigidMotion) -> np.ndarray:
    v = m.as_vector()
    if not np.all(np.isfinite(v)):
        raise InvalidArgumentError(f"non-finite motion parameters: {v}")
    out = np.eye(4)
    out[:3, :3] = rot_z(m.rz) @ rot_y(m.ry) @ rot_x(m.rx)
    out[:3, 3] = v[:3]
    return out


def check_rotation(r, tol=ORTHO_TOL):
    r = np.asarray(r, dtype=float)
    if r.shape != (3, 3) or not np.all(np.isfinite(r)):
        raise InvalidArgumentError("rotation block must be a finite 3x3 matrix")
    err = np.max(np.abs(r.T @ r - np.eye(3)))
    if err > tol or np.linalg.det(r) <= 0:
        raise InvalidArgumentError(
            f"rotation block is not a proper orthonormal matrix (|R^T R - I| = {err:.3g})"
        )


def matrix_to_euler(mat) -> RigidMotion:
    """Inverse of :func:`euler_to_matrix`.

    Raises DegenerateOrientationError when |ry| is within 1e-6 of pi/2, where
    rx and rz are not separable.
    """
    mat = np.asarray(mat, dtype=float)
    if mat.shape not in ((4, 4), (3, 4)):
        raise InvalidArgumentError(f"expected 4x4 or 3x4 matrix, got shape {mat.shape}")
    r = mat[:3, :3]
    check_rotation(r)
    ry = math.atan2(-r[2, 0], math.hypot(r[0, 0], r[1, 0]))
    if abs(ry) >= math.pi / 2 - GIMBAL_MARGIN:
        raise DegenerateOrientationError(f"pitch {ry:.9f} rad is at gimbal lock")
    rx = math.atan2(r[2, 1], r[2, 2])
    rz = math.atan2(r[1, 0], r[0, 0])
    t = mat[:3, 3]
    return RigidMotion(float(t[0]), float(t[1]), float(t[2]), rx, ry, rz)


def invert_matrix(mat) -> np.ndarray:
    """Inverse of a rigid 4x4 matrix, or of a stack of them."""
    mat = np.asarray(mat, dtype=float)
    out = np.broadcast_to(np.eye(4), mat.shape).copy()
    rt = np.swapaxes(mat[..., :3, :3], -1, -2)
    out[..., :3, :3] = rt
    out[..., :3, 3] = -np.einsum("...ij,...j->...i", rt, mat[..., :3, 3])
    return out


def invert(m: RigidMotion) -> RigidMotion:
    return matrix_to_euler(invert_matrix(euler_to_matrix(m)))


def compose(a: RigidMotion, b: RigidMotion) -> RigidMotion:
    """Motion ``a`` followed by ``b`` (expressed in the frame reached after ``a``)."""
    return matrix_to_euler(euler_to_matrix(a) @ euler_to_matrix(b))


@dataclass
class Trajectory:
    """Absolute poses (n, 4, 4); ``poses[0]`` is the identity for integrated runs."""

    poses: np.ndarray
    frame_period: float = 0.1
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.poses = np.asarray(self.poses, dtype=float).reshape(-1, 4, 4)

    def __len__(self):
        return len(self.poses)

    @property
    def positions(self) -> np.ndarray:
        return self.poses[:, :3, 3]

    def motions(self) -> list[RigidMotion]:
        return [
            matrix_to_euler(invert_matrix(self.poses[k]) @ self.poses[k + 1])
            for k in range(len(self.poses) - 1)
        ]


def integrate(motions, frame_period=0.1) -> Trajectory:
    poses = np.empty((len(motions) + 1, 4, 4))
    poses[0] = np.eye(4)
    for k, m in enumerate(motions):
        poses[k + 1] = poses[k] @ euler_to_matrix(m)
    return Trajectory(poses, frame_period)
