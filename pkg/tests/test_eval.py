import math

import numpy as np
import pytest

from lidarodom.core import RigidMotion, Trajectory, euler_to_matrix, integrate
from lidarodom.errors import UsageError
from lidarodom.eval import format_entries, format_plot_data, format_table, splice_motion, subsequence_error


def naive_subsequence_error(gt, est, step):
    """Enumerate every subsequence with plain loops."""
    errs = []
    n = len(gt)
    for length in range(100, 900, 100):
        for s in range(0, n, step):
            if s + length > n - 1:
                break
            path = sum(np.linalg.norm(gt[k + 1][:3, 3] - gt[k][:3, 3]) for k in range(s, s + length))
            if path == 0:
                continue
            a = np.linalg.inv(gt[s]) @ gt[s + length]
            b = np.linalg.inv(est[s]) @ est[s + length]
            errs.append(np.linalg.norm(a[:3, 3] - b[:3, 3]) / path)
    return float(np.mean(errs)), len(errs)


def random_walk(rng, n, noise=0.0, base=None):
    ms = []
    for k in range(n - 1):
        if base is None:
            v = np.r_[rng.normal(0, 0.2), rng.normal(0, 0.05), rng.uniform(0.5, 1.5), rng.normal(0, 0.02, 3)]
        else:
            v = base[k].as_vector() + rng.normal(0, noise, 6)
        ms.append(RigidMotion.from_vector(v))
    return ms


def test_identical_is_zero():
    traj = integrate(random_walk(np.random.default_rng(0), 150))
    rep = subsequence_error(traj, traj)
    assert rep.error == 0.0
    assert rep.f2f_translation_rmse == 0.0


def test_hand_example():
    gt = integrate([RigidMotion(tz=1.0)] * 100)
    poses = gt.poses.copy()
    poses[-1, 0, 3] += 1.0
    rep = subsequence_error(gt, Trajectory(poses), step=1)
    assert rep.count == 1
    assert rep.error == 0.01


@pytest.mark.parametrize("step", [1, 10])
def test_matches_naive_oracle(step):
    rng = np.random.default_rng(step)
    ms = random_walk(rng, 300)
    gt = integrate(ms)
    est = integrate(random_walk(rng, 300, noise=0.05, base=ms))
    expected, count = naive_subsequence_error(gt.poses, est.poses, step)
    rep = subsequence_error(gt, est, step=step)
    assert rep.count == count
    assert abs(rep.error - expected) < 1e-9


def test_per_length_reproduces_headline():
    rng = np.random.default_rng(3)
    ms = random_walk(rng, 420)
    rep = subsequence_error(integrate(ms), integrate(random_walk(rng, 420, 0.05, ms)), step=1)
    total = sum(m * c for m, c in rep.per_length.values()) / sum(c for _, c in rep.per_length.values())
    assert abs(total - rep.error) < 1e-12
    assert set(rep.per_length) == {100, 200, 300, 400}


def test_global_transform_invariance():
    rng = np.random.default_rng(4)
    ms = random_walk(rng, 200)
    gt, est = integrate(ms), integrate(random_walk(rng, 200, 0.05, ms))
    t = euler_to_matrix(RigidMotion(3, -2, 7, 0.3, -1.0, 0.2))
    moved = subsequence_error(Trajectory(t @ gt.poses), Trajectory(t @ est.poses), step=1)
    assert abs(moved.error - subsequence_error(gt, est, step=1).error) < 1e-9


def test_scale_error_converges_to_delta():
    delta = 0.01
    gt = integrate([RigidMotion(tz=1.0)] * 800)
    est = integrate([RigidMotion(tz=1.0 + delta)] * 800)
    rep = subsequence_error(gt, est)
    assert abs(rep.error - delta) < 0.1 * delta


def test_length_mismatch_and_short():
    a = integrate([RigidMotion(tz=1.0)] * 100)
    with pytest.raises(UsageError):
        subsequence_error(a, integrate([RigidMotion(tz=1.0)] * 101))
    short = integrate([RigidMotion(tz=1.0)] * 99)
    with pytest.raises(UsageError):
        subsequence_error(short, short)


def test_stationary_subsequences_are_skipped():
    gt = integrate([RigidMotion()] * 100)
    rep = subsequence_error(gt, gt)
    assert rep.count == 0 and math.isnan(rep.error)


def test_splice():
    m = RigidMotion(1, 2, 3, 0.1, 0.2, 0.3)
    assert splice_motion(m, m, "translation") == m
    assert splice_motion(m, m, "rotation") == m
    assert splice_motion(m, RigidMotion(), "translation") == RigidMotion(1, 2, 3)
    assert splice_motion(m, RigidMotion(), "rotation") == RigidMotion(0, 0, 0, 0.1, 0.2, 0.3)
    with pytest.raises(UsageError):
        splice_motion(m, m, "both")


def test_gt_rotation_splice_beats_zero_rotation_on_curve():
    rng = np.random.default_rng(5)
    gt = [RigidMotion(0, 0, 1.0, 0, 0.02, 0) for _ in range(200)]
    pred = [RigidMotion(*(np.array([0, 0, 1.0]) + rng.normal(0, 0.02, 3))) for _ in range(200)]
    with_gt = integrate([splice_motion(p, g, "translation") for p, g in zip(pred, gt)])
    zero_rot = integrate(pred)
    truth = integrate(gt)
    assert subsequence_error(truth, with_gt).error < subsequence_error(truth, zero_rot).error


def test_report_formats():
    gt = integrate([RigidMotion(tz=1.0)] * 120)
    rep = subsequence_error(gt, gt, step=10, sequence="00")
    table = format_table([rep, rep])
    assert "00" in table and "total" in table
    lines = format_entries([rep]).splitlines()
    assert lines[0] == "sequence,length,start,e_s"
    assert len(lines) == rep.count + 1
    assert lines[1].split(",")[:3] == ["00", "100", "0"]
    plot = format_plot_data(gt, gt).splitlines()
    assert len(plot) == 122
    assert plot[-1].split(",")[2] == "120.000000"
