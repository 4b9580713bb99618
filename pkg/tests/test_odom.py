import math

import numpy as np
import pytest

from lidarodom.core import RigidMotion, euler_to_matrix, matrix_to_euler, rot_y
from lidarodom.data import sim
from lidarodom.encoder import GridSpec, encode
from lidarodom.errors import UsageError
from lidarodom.odom import (
    ClassProbabilities,
    OdometryPipeline,
    RegressionModel,
    RotationClassifier,
    angle_grid,
    classify_rotation,
    decode_window,
    load_bundle,
    predict_regression,
    save_bundle,
)
from lidarodom.training import RegressionData, TrainConfig, fit_regression

SMALL = GridSpec(16, 4.0)
SMALL_CLS = GridSpec(16, 0.8)


def brute_force_decode(probs, angles, width):
    sums = [sum(probs[i : i + width]) for i in range(len(probs) - width + 1)]
    i = sums.index(max(sums))
    w, a = probs[i : i + width], angles[i : i + width]
    return sum(p * x for p, x in zip(w, a)) / sum(w)


# -- class grid and decode ----------------------------------------------------------


def test_angle_grid():
    g = np.degrees(angle_grid(13, 0.2))
    assert np.allclose(g, np.arange(-6, 7) * 0.2)
    g = np.degrees(angle_grid(56, 0.2))
    assert len(g) == 56 and np.isclose(g[0], -5.6) and np.isclose(g[-1], 5.4)
    assert np.any(np.isclose(g, 0.0)) and np.any(np.isclose(g, 0.4))


def test_decode_examples():
    p = ClassProbabilities([0.1, 0.7, 0.2], np.radians([-0.2, 0.0, 0.2]))
    assert decode_window(p, 1) == 0.0
    assert math.degrees(decode_window(p, 3)) == pytest.approx(0.02, abs=1e-12)
    assert decode_window(p, "all") == decode_window(p, 3)


def test_decode_matches_brute_force():
    rng = np.random.default_rng(0)
    angles = angle_grid(56, 0.2)
    worst = 0.0
    for trial in range(10_000):
        k = 56 if trial % 2 else 13
        p = rng.dirichlet(np.full(k, 0.3))
        a = angles if k == 56 else angle_grid(13, 0.2)
        width = int(rng.integers(1, k + 1))
        got = decode_window(ClassProbabilities(p, a), width)
        worst = max(worst, abs(got - brute_force_decode(list(p), list(a), width)))
        if width == 1:
            assert got == a[int(np.argmax(p))]
    assert worst < 1e-12


def test_decode_uniform_takes_lowest_window():
    a = angle_grid(13, 0.2)
    p = ClassProbabilities(np.full(13, 1 / 13), a)
    assert decode_window(p, 3) == pytest.approx(float(np.mean(a[:3])), abs=1e-15)


def test_decode_stays_in_grid():
    rng = np.random.default_rng(1)
    a = angle_grid(13, 0.2)
    for _ in range(200):
        v = decode_window(ClassProbabilities(rng.dirichlet(np.ones(13)), a), int(rng.integers(1, 14)))
        assert a[0] <= v <= a[-1]


@pytest.mark.parametrize("width", [0, 14, 2.0, True, "two"])
def test_decode_bad_width(width):
    with pytest.raises(UsageError):
        decode_window(ClassProbabilities(np.full(13, 1 / 13), angle_grid(13, 0.2)), width)


# -- regression model -----------------------------------------------------------------


@pytest.fixture(scope="module")
def small_run():
    world = sim.random_world(2, n_boxes=60, extent=30.0, avoid=np.zeros((1, 3)), azimuth_step=0.8)
    scans, motions, _ = sim.simulate(world, 5, motions=[RigidMotion(0.05, 0, 0.8, 0, math.radians(0.8), 0)] * 4)
    return scans, motions


def test_zero_weight_model_predicts_zero(small_run):
    scans, _ = small_run
    model = RegressionModel(2, grid=SMALL, channels=(4, 4, 4)).initialize(0)
    frames = [encode(c, SMALL) for c in scans[:3]]
    assert np.array_equal(predict_regression(model, frames), np.zeros(3))


def test_frame_count_and_shape_checked(small_run):
    scans, _ = small_run
    model = RegressionModel(2, grid=SMALL, channels=(4, 4, 4))
    frames = [encode(c, SMALL) for c in scans[:3]]
    with pytest.raises(UsageError):
        predict_regression(model, frames[:2])
    with pytest.raises(UsageError):
        predict_regression(model, [encode(c, GridSpec(16, 2.0)) for c in scans[:3]])
    with pytest.raises(UsageError):
        RegressionModel(8)


def test_branches_share_parameters():
    model = RegressionModel(3, grid=SMALL, channels=(4, 4, 4))
    keys = {n.param_key for n in model.graph.nodes if n.param_key}
    assert keys == {"cnn.conv1", "cnn.conv2", "cnn.conv3", "head"}
    assert sum(1 for n in model.graph.nodes if n.param_key == "cnn.conv1") == 3


def test_overfit_single_pair(small_run):
    scans, _ = small_run
    model = RegressionModel(1, grid=SMALL, channels=(4, 4, 4), dtype=np.float64).initialize(3)
    label = RigidMotion(0.1, 0.0, 1.0)
    data = RegressionData(model, [{"clouds": scans[:2], "motions": [label]}])
    fit_regression(model, data, TrainConfig(iterations=400, batch=1, lr=0.01, augment=False))
    out = predict_regression(model, [encode(scans[1], SMALL), encode(scans[0], SMALL)])
    assert np.max(np.abs(out - [0.1, 0.0, 1.0])) < 1e-3


def test_rotation_target_units():
    model = RegressionModel(1, "rotation", grid=SMALL, channels=(4, 4, 4))
    assert np.allclose(model.output_scale, math.pi / 180)


# -- augmentation labels ----------------------------------------------------------------


def test_roll_and_mirror_labels_match_geometry():
    model = RegressionModel(1, "both", grid=SMALL, channels=(2, 2, 2))
    data = RegressionData.__new__(RegressionData)
    data.target, data.scale = model.target, model.output_scale
    rng = np.random.default_rng(4)
    s = np.diag([-1.0, 1.0, 1.0, 1.0])
    for _ in range(20):
        m = RigidMotion.from_vector(np.r_[rng.normal(size=3), rng.uniform(-0.1, 0.1, 3)])
        angle = rng.uniform(-math.pi, math.pi)
        r = np.eye(4)
        r[:3, :3] = rot_y(angle)
        for flip in (False, True):
            t = r @ euler_to_matrix(m) @ r.T
            if flip:
                t = s @ t @ s
            want = matrix_to_euler(t).as_vector()
            got = data.transform_label(m.as_vector() / data.scale, angle, flip) * data.scale
            assert np.max(np.abs(got - want)) < 1e-9


# -- classifier ---------------------------------------------------------------------------


def test_probabilities_sum_to_one(small_run):
    scans, _ = small_run
    for axis in ("y", "x"):
        clf = RotationClassifier(axis, 0.8, 5, SMALL_CLS, (2, 2, 2), np.float64).initialize(1)
        p = classify_rotation(clf, scans[1], encode(scans[0], SMALL_CLS))
        assert p.probs.shape == (5,) and abs(p.probs.sum() - 1) < 1e-9 and np.all(p.probs > 0)


def test_y_fast_path_equals_reencoding(small_run):
    scans, _ = small_run
    clf = RotationClassifier("y", 0.8, 5, SMALL_CLS, (2, 2, 2), np.float64).initialize(1)
    assert clf.column_shifts() is not None
    fast = clf.rotated_inputs(encode(scans[1], SMALL_CLS))
    slow_clf = RotationClassifier("y", 0.8, 5, SMALL_CLS, (2, 2, 2), np.float64)
    slow_clf.column_shifts = lambda: None
    slow = slow_clf.rotated_inputs(scans[1], workers=2)
    for a, b in zip(fast, slow):
        assert np.max(np.abs(a - b)) < 1e-9


def test_class_of_clamps(caplog):
    clf = RotationClassifier("x", 0.2, 13, SMALL_CLS, (2, 2, 2))
    assert clf.class_of(0.0) == 6
    assert clf.class_of(math.radians(0.21)) == 7
    assert clf.class_of(math.radians(5.0)) == 12
    assert "outside" in caplog.text


# -- pipeline and bundle --------------------------------------------------------------------


def tiny_pipeline(window=3):
    pipe = OdometryPipeline(
        translation=RegressionModel(2, grid=SMALL, channels=(2, 2, 2)).initialize(0),
        classifiers={"y": RotationClassifier("y", 0.8, 5, SMALL_CLS, (2, 2, 2)).initialize(1)},
        window=window,
    )
    rng = np.random.default_rng(0)
    for p in pipe.translation.graph.params["head"].values():
        p[...] = rng.normal(scale=0.01, size=p.shape)
    return pipe


def test_run_sequence_one_motion_per_pair(small_run):
    scans, _ = small_run
    motions = tiny_pipeline().run_sequence(scans)
    assert len(motions) == len(scans) - 1
    assert all(isinstance(m, RigidMotion) for m in motions)


def test_warm_up_replicates_first_frame(small_run):
    scans, _ = small_run
    pipe = tiny_pipeline()
    first = pipe.run_sequence(scans[:2])[0]
    direct = pipe.estimate_motion([scans[1], scans[0], scans[0]])
    assert first == direct


def test_window_one_is_argmax(small_run):
    scans, _ = small_run
    pipe = tiny_pipeline(window=1)
    m = pipe.estimate_motion([scans[1], scans[0], scans[0]])
    clf = pipe.classifiers["y"]
    p = classify_rotation(clf, scans[1], encode(scans[0], SMALL_CLS))
    assert m.ry == p.argmax_angle


def test_bundle_round_trip(tmp_path, small_run):
    scans, _ = small_run
    pipe = tiny_pipeline()
    save_bundle(pipe, tmp_path / "b")
    back = load_bundle(tmp_path / "b")
    assert back.window == 3 and list(back.classifiers) == ["y"]
    assert back.run_sequence(scans) == pipe.run_sequence(scans)
