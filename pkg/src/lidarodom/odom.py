"""Odometry estimators built from the encoder and the network engine.

* ``RegressionModel``: N shared-weight pair branches (current frame with each
  of the N previous frames) joined by one fully connected layer that outputs
  translation or rotation.
* ``RotationClassifier``: for one axis, the current scan is rotated by each of
  K sampled angles, re-encoded, paired with the previous frame and scored by a
  shared CNN part + scorer; a softmax over the K scores gives class
  probabilities which ``decode_window`` turns into an angle.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import RigidMotion
from .encoder import HEIGHT_SCALE, EncodedFrame, GridSpec, PointCloud, encode, rotate_cloud
from .errors import DataError, IncompatibleWeightsError, UsageError
from .nn import classification_network, load_into, regression_network, save_weights
from .nn.topology import DEFAULT_CHANNELS

log = logging.getLogger(__name__)

AXES = ("x", "y", "z")
DEFAULT_CLASSES = {"x": 13, "y": 56, "z": 13}
TARGET_OUTPUTS = {"translation": 3, "rotation": 3, "both": 6}


def frame_input(frame: EncodedFrame, dtype) -> np.ndarray:
    return frame.channels_first(dtype)


@dataclass
class RegressionModel:
    n_prev: int = 5
    target: str = "translation"
    grid: GridSpec = field(default_factory=GridSpec.regression)
    channels: tuple = DEFAULT_CHANNELS
    dtype: type = np.float32
    graph: object = None

    def __post_init__(self):
        if not 1 <= self.n_prev <= 7:
            raise UsageError(f"n_prev must be in 1..7, got {self.n_prev}")
        if self.target not in TARGET_OUTPUTS:
            raise UsageError(f"target must be one of {sorted(TARGET_OUTPUTS)}, got {self.target!r}")
        self.channels = tuple(self.channels)
        if self.graph is None:
            self.graph = regression_network(
                self.n_prev, TARGET_OUTPUTS[self.target], self.grid.rows, self.grid.cols, self.channels, self.dtype
            )
        branch_keys = {n.param_key for n in self.graph.nodes if n.param_key and n.param_key.startswith("cnn.")}
        if len(branch_keys) != len(self.channels):
            raise IncompatibleWeightsError("branches do not share a single CNN parameter set")

    @property
    def output_scale(self) -> np.ndarray:
        """Physical units per network output (rotations are learned in degrees)."""
        rot = math.pi / 180.0
        return {
            "translation": np.ones(3),
            "rotation": np.full(3, rot),
            "both": np.array([1.0, 1.0, 1.0, rot, rot, rot]),
        }[self.target]

    def initialize(self, seed=0):
        """Random CNN weights and a zero head, so an untrained model predicts no motion.

        The zero head also keeps the first updates small: with random head
        weights the initial outputs are meters off and early steps blow up.
        """
        self.graph.initialize(seed)
        for v in self.graph.params["head"].values():
            v[...] = 0
        return self

    def feed(self, windows) -> dict:
        """Graph feed for a batch of frame windows (each newest-first, N+1 frames)."""
        for w in windows:
            if len(w) != self.n_prev + 1:
                raise UsageError(f"expected {self.n_prev + 1} frames, got {len(w)}")
            for f in w:
                if f.values.shape[:2] != self.grid.shape:
                    raise UsageError(f"frame shape {f.values.shape[:2]} does not match grid {self.grid.shape}")
        return {
            f"frame{i}": np.stack([frame_input(w[i], self.graph.dtype) for w in windows])
            for i in range(self.n_prev + 1)
        }

    def predict_batch(self, windows) -> np.ndarray:
        out = self.graph.forward(self.feed(windows))["motion"]
        return out.astype(np.float64) * self.output_scale


def predict_regression(model: RegressionModel, frames) -> np.ndarray:
    """Motion parameters from N+1 encoded frames ordered newest first."""
    return model.predict_batch([list(frames)])[0]


# ---------------------------------------------------------------------------


@dataclass
class ClassProbabilities:
    probs: np.ndarray
    grid: np.ndarray  # class angles, radians
    axis: str = "y"

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.probs.shape != self.grid.shape:
            raise UsageError("probabilities and angle grid differ in length")

    @property
    def argmax_angle(self) -> float:
        return float(self.grid[int(np.argmax(self.probs))])


def angle_grid(n_classes: int, step_deg: float) -> np.ndarray:
    """Class angles (radians) spaced ``step_deg`` apart with 0 as a class centre.

    Odd K is symmetric; even K has one more class below zero than above
    (K=56 at 0.2 deg spans -5.6 .. +5.4 deg).
    """
    k = np.arange(n_classes) - n_classes // 2
    return np.radians(k * step_deg)


@dataclass
class RotationClassifier:
    axis: str = "y"
    step_deg: float = 0.2
    n_classes: int | None = None
    grid: GridSpec = field(default_factory=GridSpec.classification)
    channels: tuple = DEFAULT_CHANNELS
    dtype: type = np.float32
    graph: object = None

    def __post_init__(self):
        if self.axis not in AXES:
            raise UsageError(f"axis must be one of x, y, z, got {self.axis!r}")
        if self.n_classes is None:
            self.n_classes = DEFAULT_CLASSES[self.axis]
        if self.n_classes < 2:
            raise UsageError("a classifier needs at least 2 classes")
        self.channels = tuple(self.channels)
        if self.graph is None:
            self.graph = classification_network(
                self.n_classes, self.grid.rows, self.grid.cols, self.channels, self.dtype
            )
        self._train_graphs = {}

    @property
    def angles(self) -> np.ndarray:
        return angle_grid(self.n_classes, self.step_deg)

    def initialize(self, seed=0):
        self.graph.initialize(seed)
        return self

    def column_shifts(self):
        """Integer column shift per class when rotation is a pure column roll, else None."""
        if self.axis != "y":
            return None
        shifts = np.degrees(self.angles) / self.grid.azimuth_step
        if np.max(np.abs(shifts - np.round(shifts))) > 1e-9:
            return None
        return np.round(shifts).astype(int)

    def class_of(self, angle: float, warn=True) -> int:
        idx = int(np.argmin(np.abs(self.angles - angle)))
        lo, hi = self.angles[0], self.angles[-1]
        half = math.radians(self.step_deg) / 2
        if warn and not (lo - half <= angle <= hi + half):
            log.warning(
                "%s rotation %.4f deg outside class grid [%.2f, %.2f]; clamped",
                self.axis, math.degrees(angle), math.degrees(lo), math.degrees(hi),
            )
        return idx

    def rotated_inputs(self, current, class_idx=None, workers=1) -> list[np.ndarray]:
        """Encoded current frame rotated to each class angle (channels-first).

        ``current`` is a PointCloud, or an EncodedFrame when rotations about
        this axis are exact column rolls.
        """
        idx = range(self.n_classes) if class_idx is None else class_idx
        shifts = self.column_shifts()
        if shifts is not None:
            base = current if isinstance(current, EncodedFrame) else encode(current, self.grid)
            x = frame_input(base, self.graph.dtype)
            # rotating by +k steps about y lowers every azimuth by k columns
            return [np.roll(x, -shifts[i], axis=2) for i in idx]
        if isinstance(current, EncodedFrame):
            raise UsageError(f"{self.axis}-axis classification needs the raw point cloud")
        angles = self.angles

        def one(i):
            return frame_input(encode(rotate_cloud(current, self.axis, float(angles[i])), self.grid), self.graph.dtype)

        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                return list(pool.map(one, idx))
        return [one(i) for i in idx]

    def scores_graph(self, n_branches):
        """Graph with ``n_branches`` class branches sharing this classifier's parameters."""
        if n_branches == self.n_classes:
            return self.graph
        g = self._train_graphs.get(n_branches)
        if g is None:
            g = classification_network(n_branches, self.grid.rows, self.grid.cols, self.channels, self.graph.dtype)
            g.params = self.graph.params
            self._train_graphs[n_branches] = g
        return g

    def probabilities(self, rotated, previous) -> np.ndarray:
        prev = previous if isinstance(previous, np.ndarray) else frame_input(previous, self.graph.dtype)
        feed = {f"current{k}": r[None] for k, r in enumerate(rotated)}
        feed["previous"] = prev[None]
        return self.graph.forward(feed)["probs"][0].astype(np.float64)


def classify_rotation(clf: RotationClassifier, current, previous: EncodedFrame, workers=1) -> ClassProbabilities:
    if previous.values.shape[:2] != clf.grid.shape:
        raise UsageError(f"previous frame shape {previous.values.shape[:2]} does not match grid {clf.grid.shape}")
    rotated = clf.rotated_inputs(current, workers=workers)
    p = clf.probabilities(rotated, previous)
    return ClassProbabilities(p / p.sum(), clf.angles, clf.axis)


def best_window(probs, width: int) -> int:
    """Start index of the contiguous window with the largest mass (lowest on ties)."""
    best, best_i = -1.0, 0
    for i in range(len(probs) - width + 1):
        s = math.fsum(probs[i : i + width])
        if s > best:
            best, best_i = s, i
    return best_i


def decode_window(p: ClassProbabilities, width=3) -> float:
    """Probability-weighted mean angle over the most probable window of ``width`` classes.

    ``width=1`` is the argmax; ``width="all"`` averages over every class.
    """
    k = len(p.probs)
    if width == "all":
        width = k
    if isinstance(width, bool) or not isinstance(width, (int, np.integer)) or not 1 <= width <= k:
        raise UsageError(f"window width must be an integer in 1..{k} or 'all', got {width!r}")
    i = best_window(p.probs, int(width))
    if width == 1:
        return float(p.grid[i])
    w = p.probs[i : i + width]
    a = p.grid[i : i + width]
    mass = math.fsum(w)
    if mass <= 0:
        return float(np.mean(a))
    return math.fsum(w * a) / mass


# ---------------------------------------------------------------------------


@dataclass
class OdometryPipeline:
    """Translation regressor plus a rotation estimator.

    ``rotation`` is ``"classification"`` (per-axis classifiers decoded with a
    window of ``window`` classes), ``"regression"`` (a RegressionModel with
    target rotation) or ``"none"`` (zero rotation; splice ground truth later).
    """

    translation: RegressionModel | None = None
    rotation: str = "classification"
    rotation_model: RegressionModel | None = None
    classifiers: dict = field(default_factory=dict)
    window: object = 3
    height_scale: float = HEIGHT_SCALE
    workers: int = 1

    @property
    def n_prev(self):
        models = [m for m in (self.translation, self.rotation_model) if m is not None]
        return max([m.n_prev for m in models], default=1)

    def estimate_motion(self, clouds, frames=None, cls_frames=None) -> RigidMotion:
        """Motion between ``clouds[1]`` and ``clouds[0]`` (newest first).

        ``frames``/``cls_frames`` optionally supply precomputed encodings at the
        regression and classification grids.
        """
        t = np.zeros(3)
        r = np.zeros(3)
        if self.translation is not None:
            m = self.translation
            fr = frames or [encode(c, m.grid, self.height_scale) for c in clouds]
            t = predict_regression(m, fr[: m.n_prev + 1])[:3]
        if self.rotation == "regression" and self.rotation_model is not None:
            m = self.rotation_model
            fr = frames or [encode(c, m.grid, self.height_scale) for c in clouds]
            out = predict_regression(m, fr[: m.n_prev + 1])
            r = out[-3:]
        elif self.rotation == "classification":
            for axis, clf in self.classifiers.items():
                if cls_frames is not None:
                    prev = cls_frames[1]
                    cur = cls_frames[0] if clf.column_shifts() is not None else clouds[0]
                else:
                    prev = encode(clouds[1], clf.grid, self.height_scale)
                    cur = clouds[0]
                probs = classify_rotation(clf, cur, prev, self.workers)
                r[AXES.index(axis)] = decode_window(probs, self.window)
        return RigidMotion(*t, *r)

    def run_sequence(self, clouds, progress=None) -> list[RigidMotion]:
        """One motion per consecutive frame pair.

        Frames before the start of the sequence are replaced by frame 0.
        """
        n = len(clouds)
        need_reg = self.translation is not None or self.rotation == "regression"
        reg_grid = (self.translation or self.rotation_model).grid if need_reg else None
        reg = [encode(c, reg_grid, self.height_scale) for c in clouds] if need_reg else None
        cls_grid = next(iter(self.classifiers.values())).grid if self.classifiers and self.rotation == "classification" else None
        cls = [encode(c, cls_grid, self.height_scale) for c in clouds] if cls_grid is not None else None
        motions = []
        for k in range(1, n):
            idx = [max(k - i, 0) for i in range(self.n_prev + 1)]
            motions.append(
                self.estimate_motion(
                    [clouds[i] for i in idx[:2]],
                    [reg[i] for i in idx] if reg is not None else None,
                    [cls[i] for i in idx[:2]] if cls is not None else None,
                )
            )
            if progress:
                progress(k)
        return motions


# ---------------------------------------------------------------------------
# model bundle: directory with manifest.txt (key=value) + ODNW weight files

MANIFEST = "manifest.txt"
BUNDLE_FORMAT = "lidarodom-bundle-1"


def _write_manifest(path: Path, entries: dict):
    path.write_text("".join(f"{k}={v}\n" for k, v in entries.items()))


def read_manifest(path) -> dict:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise DataError(f"{path}:{lineno}: expected key=value")
        out[key.strip()] = value.strip()
    return out


def save_bundle(pipeline: OdometryPipeline, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = {"format": BUNDLE_FORMAT, "height_scale": repr(pipeline.height_scale), "rotation": pipeline.rotation}
    entries["window"] = str(pipeline.window)
    for role, m in (("translation", pipeline.translation), ("rotation_model", pipeline.rotation_model)):
        if m is None:
            continue
        fname = f"{role}.odnw"
        (d / fname).write_bytes(save_weights(m.graph))
        entries.update(
            {
                f"{role}.weights": fname,
                f"{role}.target": m.target,
                f"{role}.n_prev": str(m.n_prev),
                f"{role}.rows": str(m.grid.rows),
                f"{role}.azimuth_step": repr(m.grid.azimuth_step),
                f"{role}.channels": ",".join(map(str, m.channels)),
            }
        )
    if pipeline.classifiers:
        entries["classifier_axes"] = ",".join(pipeline.classifiers)
    for axis, clf in pipeline.classifiers.items():
        fname = f"classifier_{axis}.odnw"
        (d / fname).write_bytes(save_weights(clf.graph))
        entries.update(
            {
                f"classifier_{axis}.weights": fname,
                f"classifier_{axis}.classes": str(clf.n_classes),
                f"classifier_{axis}.step_deg": repr(clf.step_deg),
                f"classifier_{axis}.rows": str(clf.grid.rows),
                f"classifier_{axis}.azimuth_step": repr(clf.grid.azimuth_step),
                f"classifier_{axis}.channels": ",".join(map(str, clf.channels)),
            }
        )
    _write_manifest(d / MANIFEST, entries)
    return d


def load_bundle(directory, dtype=np.float32) -> OdometryPipeline:
    d = Path(directory)
    if not (d / MANIFEST).exists():
        raise DataError(f"{d}: no {MANIFEST} in model bundle")
    m = read_manifest(d / MANIFEST)
    if m.get("format") != BUNDLE_FORMAT:
        raise IncompatibleWeightsError(f"{d}: unsupported bundle format {m.get('format')!r}")

    def channels(prefix):
        return tuple(int(c) for c in m[f"{prefix}.channels"].split(","))

    def regression(role):
        if f"{role}.weights" not in m:
            return None
        model = RegressionModel(
            int(m[f"{role}.n_prev"]),
            m[f"{role}.target"],
            GridSpec(int(m[f"{role}.rows"]), float(m[f"{role}.azimuth_step"])),
            channels(role),
            dtype,
        )
        load_into(model.graph, (d / m[f"{role}.weights"]).read_bytes())
        return model

    classifiers = {}
    axes = [a for a in m.get("classifier_axes", "").split(",") if a]
    for axis in axes:
        p = f"classifier_{axis}"
        clf = RotationClassifier(
            axis,
            float(m[f"{p}.step_deg"]),
            int(m[f"{p}.classes"]),
            GridSpec(int(m[f"{p}.rows"]), float(m[f"{p}.azimuth_step"])),
            channels(p),
            dtype,
        )
        load_into(clf.graph, (d / m[f"{p}.weights"]).read_bytes())
        classifiers[axis] = clf
    window = m.get("window", "3")
    return OdometryPipeline(
        translation=regression("translation"),
        rotation=m.get("rotation", "classification"),
        rotation_model=regression("rotation_model"),
        classifiers=classifiers,
        window=window if window == "all" else int(window),
        height_scale=float(m.get("height_scale", HEIGHT_SCALE)),
    )
