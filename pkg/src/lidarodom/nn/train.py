"""Losses, SGD with momentum, and the single training step."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import DivergenceError, UsageError

def mse(pred, target):
    """Batch mean of the per-sample mean squared error, and its gradient."""
    pred = np.asarray(pred)
    diff = pred - np.asarray(target, dtype=pred.dtype).reshape(pred.shape)
    b = pred.shape[0]
    per_out = diff[0].size
    loss = float(np.sum(diff.astype(np.float64) ** 2) / (b * per_out))
    return loss, (2.0 / (b * per_out)) * diff


def cross_entropy(probs, target):
    """Cross entropy of softmax outputs against class indices or one-hot rows.

    The gradient is taken w.r.t. the probabilities; chained through the
    softmax layer's backward it reduces to ``probs - onehot``.
    """
    probs = np.asarray(probs)
    b, k = probs.shape
    target = np.asarray(target)
    if target.ndim == 1:
        onehot = np.zeros((b, k), dtype=probs.dtype)
        onehot[np.arange(b), target.astype(int)] = 1.0
    else:
        onehot = target.astype(probs.dtype).reshape(b, k)
    # the floor must be representable in the probabilities' own precision
    safe = np.maximum(probs, np.finfo(probs.dtype).tiny)
    loss = float(-np.sum(onehot * np.log(safe.astype(np.float64))) / b)
    return loss, -onehot / safe / b


LOSSES = {"mse": mse, "cross_entropy": cross_entropy}


@dataclass
class SGD:
    """SGD with momentum (``v = m*v + g; p -= lr*v``) and a step lr schedule."""

    lr: float = 0.01
    momentum: float = 0.9
    step_size: int = 0  # multiply lr by gamma every step_size updates (0: never)
    gamma: float = 0.1
    clip_norm: float = 0.0
    steps: int = 0
    velocity: dict = field(default_factory=dict)

    def current_lr(self):
        if self.step_size > 0:
            return self.lr * self.gamma ** (self.steps // self.step_size)
        return self.lr

    def step(self, params: dict, grads: dict):
        lr = self.current_lr()
        scale = 1.0
        if self.clip_norm > 0:
            norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for p in grads.values() for g in p.values()))
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        for key, p in params.items():
            for name, value in p.items():
                g = grads[key][name] * scale
                v = self.velocity.get((key, name))
                if v is None:
                    v = np.zeros_like(value)
                v = self.momentum * v + g
                self.velocity[(key, name)] = v
                if lr:
                    value -= (lr * v).astype(value.dtype)
        self.steps += 1


def train_step(graph, batch, loss="mse", optimizer: SGD | None = None) -> float:
    """One forward/backward/update. Returns the pre-update batch loss.

    ``batch`` is ``(feed, target)`` where ``feed`` maps graph inputs to arrays
    with a leading batch axis. The graph must have exactly one output.
    """
    feed, target = batch
    if len(graph.outputs) != 1:
        raise UsageError("train_step needs a graph with a single output")
    if loss not in LOSSES:
        raise UsageError(f"unknown loss {loss!r}; choose from {sorted(LOSSES)}")
    out_name = graph.outputs[0]
    pred = graph.forward(feed, training=True)[out_name]
    if pred.shape[0] == 0:
        raise UsageError("empty batch")
    value, grad = LOSSES[loss](pred, target)
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite {loss} loss ({value}); training aborted")
    grads = graph.backward({out_name: grad})
    optimizer = optimizer or SGD()
    optimizer.step(graph.params, grads)
    return value
