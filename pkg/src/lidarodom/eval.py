"""Odometry error metrics.

The headline number follows the KITTI odometry convention: every subsequence
of 100, 200, ..., 800 frames is aligned to its first pose, the endpoint
position error is divided by the ground-truth path length, and the result is
averaged over all subsequences of all lengths.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from .core import RigidMotion, Trajectory, invert_matrix
from .errors import UsageError

LENGTHS = tuple(range(100, 900, 100))
DEFAULT_STEP = 10


@dataclass
class EvalReport:
    error: float  # mean e_s over all subsequences, nan if none had nonzero length
    entries: np.ndarray  # (m, 3): length, start, e_s
    rotation_error: float  # informational, radians per meter
    f2f_translation_rmse: float  # meters
    f2f_rotation_rmse: float  # radians
    sequence: str = ""
    step: int = DEFAULT_STEP
    per_length: dict = field(default_factory=dict)  # length -> (mean e_s, count)

    def __post_init__(self):
        self.per_length = {}
        for length in LENGTHS:
            sel = self.entries[:, 0] == length
            if sel.any():
                self.per_length[length] = (float(np.mean(self.entries[sel, 2])), int(sel.sum()))

    @property
    def count(self) -> int:
        return len(self.entries)


def _rotation_angle(r):
    """Angle of a rotation matrix (or stack of them)."""
    tr = np.trace(r, axis1=-2, axis2=-1)
    return np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0))


def _relative(poses, starts, length):
    return np.einsum("nij,njk->nik", invert_matrix(poses[starts]), poses[starts + length])


def subsequence_error(gt: Trajectory, est: Trajectory, step=DEFAULT_STEP, lengths=LENGTHS, sequence="") -> EvalReport:
    """Subsequence endpoint error of ``est`` against ``gt``.

    Subsequences whose ground-truth path length is zero are skipped, since
    their ratio is undefined.
    """
    g = np.asarray(gt.poses, dtype=float)
    e = np.asarray(est.poses, dtype=float)
    if len(g) != len(e):
        raise UsageError(f"trajectory lengths differ: ground truth {len(g)}, estimate {len(e)}")
    if len(g) < 101:
        raise UsageError(f"need at least 101 poses for a 100-frame subsequence, got {len(g)}")
    if step < 1:
        raise UsageError(f"step must be >= 1, got {step}")
    n = len(g)
    dist = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(g[:, :3, 3], axis=0), axis=1))])
    rows, rot = [], []
    for length in lengths:
        starts = np.arange(0, n - length, step)
        if len(starts) == 0:
            continue
        path = dist[starts + length] - dist[starts]
        ok = path > 0
        starts, path = starts[ok], path[ok]
        rel_g = _relative(g, starts, length)
        rel_e = _relative(e, starts, length)
        err = np.linalg.norm(rel_g[:, :3, 3] - rel_e[:, :3, 3], axis=1) / path
        delta = np.einsum("nji,njk->nik", rel_e[:, :3, :3], rel_g[:, :3, :3])
        rot.append(_rotation_angle(delta) / path)
        rows.append(np.column_stack([np.full(len(starts), length), starts, err]))
    entries = np.concatenate(rows) if rows else np.zeros((0, 3))
    rot_all = np.concatenate(rot) if rot else np.zeros(0)

    step_g = np.einsum("nij,njk->nik", invert_matrix(g[:-1]), g[1:])
    step_e = np.einsum("nij,njk->nik", invert_matrix(e[:-1]), e[1:])
    dt = step_g[:, :3, 3] - step_e[:, :3, 3]
    dr = _rotation_angle(np.einsum("nji,njk->nik", step_e[:, :3, :3], step_g[:, :3, :3]))
    return EvalReport(
        error=float(np.mean(entries[:, 2])) if len(entries) else math.nan,
        entries=entries,
        rotation_error=float(np.mean(rot_all)) if len(rot_all) else math.nan,
        f2f_translation_rmse=float(np.sqrt(np.mean(np.sum(dt**2, axis=1)))),
        f2f_rotation_rmse=float(np.sqrt(np.mean(dr**2))),
        sequence=sequence,
        step=step,
    )


def splice_motion(predicted: RigidMotion, ground_truth: RigidMotion, keep="translation") -> RigidMotion:
    """Take the kept half of the parameters from ``predicted``, the rest from ``ground_truth``."""
    p, g = predicted.as_vector(), ground_truth.as_vector()
    if keep == "translation":
        return RigidMotion.from_vector(np.r_[p[:3], g[3:]])
    if keep == "rotation":
        return RigidMotion.from_vector(np.r_[g[:3], p[3:]])
    raise UsageError(f"keep must be 'translation' or 'rotation', got {keep!r}")


# -- report files -------------------------------------------------------------


def format_table(reports) -> str:
    out = io.StringIO()
    out.write(f"{'sequence':<10} {'length':>6} {'count':>6} {'error':>10}\n")
    for r in reports:
        for length, (mean, count) in r.per_length.items():
            out.write(f"{r.sequence:<10} {length:>6d} {count:>6d} {mean:>10.5f}\n")
        out.write(f"{r.sequence:<10} {'all':>6} {r.count:>6d} {r.error:>10.5f}\n")
        out.write(
            f"{r.sequence:<10} f2f translation rmse {r.f2f_translation_rmse:.5f} m, "
            f"rotation rmse {math.degrees(r.f2f_rotation_rmse):.5f} deg, "
            f"rotation error {math.degrees(r.rotation_error):.6f} deg/m\n"
        )
    if len(reports) > 1:
        allv = np.concatenate([r.entries[:, 2] for r in reports])
        mean = float(np.mean(allv)) if len(allv) else math.nan
        out.write(f"{'total':<10} {'all':>6} {len(allv):>6d} {mean:>10.5f}\n")
    return out.getvalue()


def format_entries(reports, delimiter=",") -> str:
    lines = [delimiter.join(["sequence", "length", "start", "e_s"])]
    for r in reports:
        for length, start, err in r.entries:
            lines.append(delimiter.join([r.sequence, str(int(length)), str(int(start)), repr(float(err))]))
    return "\n".join(lines) + "\n"


def format_plot_data(gt: Trajectory, est: Trajectory, delimiter=",") -> str:
    """x and z of every pose, for ground truth and estimate side by side."""
    lines = [delimiter.join(["frame", "gt_x", "gt_z", "est_x", "est_z"])]
    for k, (pg, pe) in enumerate(zip(gt.positions, est.positions)):
        lines.append(delimiter.join([str(k)] + [f"{v:.6f}" for v in (pg[0], pg[2], pe[0], pe[2])]))
    return "\n".join(lines) + "\n"
