"""Training loops for the regression and rotation-classification networks."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .core import RigidMotion, euler_to_matrix, matrix_to_euler, rot_y
from .encoder import encode
from .errors import UsageError
from .nn import SGD, train_step
from .odom import AXES, RegressionModel, RotationClassifier, frame_input

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 10
    iterations: int = -1  # >= 0 overrides epochs; 0 records the initial loss only
    batch: int = 8
    lr: float = 0.003
    momentum: float = 0.9
    lr_step: int = 0
    lr_gamma: float = 0.1
    clip_norm: float = 10.0
    seed: int = 0
    augment: bool = False  # regression: random column rolls and mirroring
    sampled_classes: int = 12  # classes per training example (classifier)
    neighbor_classes: int = 3  # always include +-this many classes around the truth

    def optimizer(self):
        # iterations=0 evaluates the initial loss without moving any parameter
        lr = 0.0 if self.iterations == 0 else self.lr
        return SGD(lr, self.momentum, self.lr_step, self.lr_gamma, self.clip_norm)


def _schedule(n_samples, cfg: TrainConfig, rng):
    """Batches of sample indices: whole shuffled epochs, cut to ``iterations`` if set."""
    if n_samples == 0:
        raise UsageError("no training samples")
    total = cfg.iterations if cfg.iterations >= 0 else cfg.epochs * math.ceil(n_samples / cfg.batch)
    total = max(total, 1)  # iterations=0 still evaluates one batch
    done = 0
    while done < total:
        order = rng.permutation(n_samples)
        for s in range(0, n_samples, cfg.batch):
            if done >= total:
                return
            yield order[s : s + cfg.batch]
            done += 1


# ---------------------------------------------------------------------------


class RegressionData:
    """Encoded frames of several sequences plus (window, label) sample tables."""

    def __init__(self, model: RegressionModel, sequences, height_scale=3.0):
        frames, windows, labels = [], [], []
        for seq in sequences:
            base = len(frames)
            enc = seq.get("frames") or [encode(c, model.grid, height_scale) for c in seq["clouds"]]
            frames.extend(frame_input(f, np.float32) for f in enc)
            for k in range(1, len(enc)):
                windows.append([base + max(k - i, 0) for i in range(model.n_prev + 1)])
                labels.append(_target(model, seq["motions"][k - 1]))
        self.frames = np.stack(frames) if frames else np.zeros((0, 3) + model.grid.shape, np.float32)
        self.windows = np.array(windows, dtype=np.int64).reshape(-1, model.n_prev + 1)
        self.labels = np.array(labels, dtype=np.float64).reshape(len(windows), -1)
        self.n_prev = model.n_prev
        self.target = model.target
        self.scale = model.output_scale

    def __len__(self):
        return len(self.windows)

    def feed(self, idx):
        w = self.windows[idx]
        return {f"frame{i}": self.frames[w[:, i]] for i in range(self.n_prev + 1)}

    def augmented(self, idx, rng):
        """Batch with every window turned about y by a random whole number of
        columns and mirrored left-right half of the time.

        Both are exact symmetries of the encoding: a roll by -k columns is a
        rotation by +k steps about y, and mirroring is x -> -x. Labels are
        transformed to match.
        """
        feed = self.feed(idx)
        labels = self.labels[idx].copy()
        cols = self.frames.shape[-1]
        for j in range(len(idx)):
            k = int(rng.integers(cols))
            flip = bool(rng.integers(2))
            for x in feed.values():
                v = np.roll(x[j], -k, axis=2)
                x[j] = np.roll(v[:, :, ::-1], cols // 2, axis=2) if flip else v
            labels[j] = self.transform_label(labels[j], math.radians(k * 360.0 / cols), flip)
        return feed, labels

    def transform_label(self, label, angle, flip):
        """Label of a motion seen from a sensor turned by ``angle`` about y, then mirrored."""
        v = label * self.scale
        parts = {"translation": (v, None), "rotation": (None, v), "both": (v[:3], v[3:])}[self.target]
        t, r = parts
        ry = rot_y(angle)
        out = []
        if t is not None:
            t = ry @ t
            out.append(t * [-1.0, 1.0, 1.0] if flip else t)
        if r is not None:
            m = np.eye(4)
            m[:3, :3] = ry @ euler_to_matrix(RigidMotion(0, 0, 0, *r))[:3, :3] @ ry.T
            r = matrix_to_euler(m).rotation
            out.append(r * [1.0, -1.0, -1.0] if flip else r)
        return np.concatenate(out) / self.scale


def _target(model: RegressionModel, motion):
    v = motion.as_vector()
    sel = {"translation": v[:3], "rotation": v[3:], "both": v}[model.target]
    return sel / model.output_scale


def fit_regression(model: RegressionModel, data: RegressionData, cfg: TrainConfig, on_step=None):
    """Train ``model`` in place; returns the list of pre-update batch losses."""
    rng = np.random.default_rng([cfg.seed, 11])
    opt = cfg.optimizer()
    losses = []
    for step, idx in enumerate(_schedule(len(data), cfg, rng)):
        batch = data.augmented(idx, rng) if cfg.augment else (data.feed(idx), data.labels[idx])
        loss = train_step(model.graph, batch, "mse", opt)
        losses.append(loss)
        if on_step:
            on_step(step, loss)
    return losses


# ---------------------------------------------------------------------------


class ClassificationData:
    """Consecutive-frame pairs for one rotation axis.

    For y rotations at a grid whose step divides the class spacing, rotated
    inputs are column rolls of the stored current encoding; other axes keep
    the raw clouds and re-encode per sampled class.
    """

    def __init__(self, clf: RotationClassifier, sequences, height_scale=3.0):
        self.clf = clf
        self.fast = clf.column_shifts() is not None
        frames, clouds, pairs, angles = [], [], [], []
        axis = AXES.index(clf.axis)
        for seq in sequences:
            base = len(frames)
            enc = seq.get("cls_frames") or [encode(c, clf.grid, height_scale) for c in seq["clouds"]]
            frames.extend(frame_input(f, np.float32) for f in enc)
            if not self.fast:
                clouds.extend(seq["clouds"])
            for k in range(1, len(enc)):
                pairs.append((base + k, base + k - 1))
                angles.append(seq["motions"][k - 1].rotation[axis])
        self.frames = np.stack(frames)
        self.clouds = clouds
        self.pairs = np.array(pairs, dtype=np.int64).reshape(-1, 2)
        self.angles = np.array(angles)
        outside = np.abs(self.angles) > np.abs(clf.angles).max() + math.radians(clf.step_deg) / 2
        if outside.any():
            log.warning("%d %s-rotation labels outside the class grid; clamped", int(outside.sum()), clf.axis)
        self.labels = np.array([clf.class_of(a, warn=False) for a in self.angles], dtype=np.int64)
        self.height_scale = height_scale

    def __len__(self):
        return len(self.pairs)

    def sample_classes(self, label, n, neighbors, rng):
        k = self.clf.n_classes
        if n >= k:
            return np.arange(k)
        near = set(range(max(0, label - neighbors), min(k, label + neighbors + 1)))
        rest = np.setdiff1d(np.arange(k), sorted(near))
        extra = rng.choice(rest, size=max(0, min(n - len(near), len(rest))), replace=False)
        return np.array(sorted(near | set(int(e) for e in extra)))

    def rotated(self, i, classes):
        cur = self.pairs[i, 0]
        if self.fast:
            shifts = self.clf.column_shifts()
            return [np.roll(self.frames[cur], -shifts[c], axis=2) for c in classes]
        return self.clf.rotated_inputs(self.clouds[cur], class_idx=list(classes))


def fit_classifier(clf: RotationClassifier, data: ClassificationData, cfg: TrainConfig, on_step=None):
    """Train with a sampled softmax: each example scores its true class, the
    ``neighbor_classes`` on either side and random other classes, padded to a
    fixed ``sampled_classes`` branches per batch."""
    rng = np.random.default_rng([cfg.seed, 13])
    opt = cfg.optimizer()
    n_branch = min(cfg.sampled_classes, clf.n_classes)
    neighbors = min(cfg.neighbor_classes, (n_branch - 1) // 2)
    graph = clf.scores_graph(n_branch)
    losses = []
    for step, idx in enumerate(_schedule(len(data), cfg, rng)):
        currents = [[] for _ in range(n_branch)]
        prev, target = [], []
        for i in idx:
            label = int(data.labels[i])
            classes = data.sample_classes(label, n_branch, neighbors, rng)
            for j, x in enumerate(data.rotated(i, classes)):
                currents[j].append(x)
            prev.append(data.frames[data.pairs[i, 1]])
            target.append(int(np.searchsorted(classes, label)))
        feed = {f"current{j}": np.stack(c) for j, c in enumerate(currents)}
        feed["previous"] = np.stack(prev)
        loss = train_step(graph, (feed, np.array(target)), "cross_entropy", opt)
        losses.append(loss)
        if on_step:
            on_step(step, loss)
    return losses


# ---------------------------------------------------------------------------


def train_pipeline(pipeline, sequences, cfg: TrainConfig, on_step=None):
    """Train every network of ``pipeline`` on ``sequences``.

    Each sequence is a dict with ``clouds`` and ``motions`` (one per
    consecutive pair). ``on_step(model_name, step, loss)`` is called per batch.
    Returns ``{model_name: losses}``.
    """
    def hook(name):
        return (lambda step, loss: on_step(name, step, loss)) if on_step else None

    hs = pipeline.height_scale
    out = {}
    for name, model in (("translation", pipeline.translation), ("rotation", pipeline.rotation_model)):
        if model is None or (name == "rotation" and pipeline.rotation != "regression"):
            continue
        log.info("training %s regression on %d sequences", name, len(sequences))
        out[name] = fit_regression(model, RegressionData(model, sequences, hs), cfg, hook(name))
    if pipeline.rotation == "classification":
        for axis, clf in pipeline.classifiers.items():
            log.info("training %s-axis rotation classifier", axis)
            name = f"classifier_{axis}"
            out[name] = fit_classifier(clf, ClassificationData(clf, sequences, hs), cfg, hook(name))
    return out
