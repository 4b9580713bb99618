"""Stock networks.

Regression CNN part (frame pair stacked to 6 x 64 x 360)::

    conv 3x3 pad 1, 6->16, relu, pool   -> 16 x 32 x 180
    conv 3x3 pad 1, 16->32, relu, pool  -> 32 x 16 x 90
    conv 3x3 pad 1, 32->64, relu, pool  -> 64 x 8 x 45

Classification CNN part (6 x 64 x 1800): the first conv is 3x15 with stride
1x5 (pad 1x5), which brings the width to 360; the remaining stages match the
regression part.
"""
from __future__ import annotations

import numpy as np

from .graph import LayerGraph
from .layers import Concat, Conv2D, FullyConnected, MaxPool2D, ReLU, Softmax

STOCK_TOPOLOGIES = ("cnn-part-regression", "cnn-part-classification", "regression-head", "classification-head")
FRAME_CHANNELS = 3
DEFAULT_CHANNELS = (16, 32, 64)


def cnn_part(g: LayerGraph, x: str, prefix: str, kind="regression", channels=DEFAULT_CHANNELS, shared="cnn") -> str:
    """Append one shared-weight CNN part reading node ``x``; returns its output node."""
    c_in = 2 * FRAME_CHANNELS
    for i, c_out in enumerate(channels):
        if i == 0 and kind == "classification":
            conv = Conv2D(c_in, c_out, kernel=(3, 15), stride=(1, 5), padding=(1, 5))
        else:
            conv = Conv2D(c_in, c_out, kernel=3, stride=1, padding=1)
        x = g.add(f"{prefix}.conv{i + 1}", conv, x, param_key=f"{shared}.conv{i + 1}")
        x = g.add(f"{prefix}.relu{i + 1}", ReLU(), x)
        x = g.add(f"{prefix}.pool{i + 1}", MaxPool2D(), x)
        c_in = c_out
    return x


def regression_network(n_prev=5, outputs=3, rows=64, cols=360, channels=DEFAULT_CHANNELS, dtype=np.float64) -> LayerGraph:
    """Inputs ``frame0`` (current) .. ``frame{n_prev}``; output ``motion`` (B, outputs)."""
    inputs = {f"frame{i}": (FRAME_CHANNELS, rows, cols) for i in range(n_prev + 1)}
    g = LayerGraph(inputs, dtype)
    feats = []
    for i in range(1, n_prev + 1):
        pair = g.add(f"b{i}.pair", Concat(2), ["frame0", f"frame{i}"])
        feats.append(cnn_part(g, pair, f"b{i}", "regression", channels))
    joined = g.add("join", Concat(len(feats)), feats) if len(feats) > 1 else feats[0]
    fan_in = int(np.prod(g.shapes[joined]))
    g.add("motion", FullyConnected(fan_in, outputs), joined, param_key="head")
    g.set_outputs("motion")
    return g


def classification_network(n_classes, rows=64, cols=1800, channels=DEFAULT_CHANNELS, dtype=np.float64) -> LayerGraph:
    """Inputs ``current{k}`` (rotated current frame per class) and ``previous``.

    Every class runs the same CNN part and the same fully connected scorer;
    the K scores are concatenated and normalised by a softmax (output ``probs``).
    """
    inputs = {f"current{k}": (FRAME_CHANNELS, rows, cols) for k in range(n_classes)}
    inputs["previous"] = (FRAME_CHANNELS, rows, cols)
    g = LayerGraph(inputs, dtype)
    scores = []
    for k in range(n_classes):
        pair = g.add(f"c{k}.pair", Concat(2), [f"current{k}", "previous"])
        feat = cnn_part(g, pair, f"c{k}", "classification", channels)
        fan_in = int(np.prod(g.shapes[feat]))
        scores.append(g.add(f"c{k}.score", FullyConnected(fan_in, 1), feat, param_key="scorer"))
    logits = g.add("logits", Concat(n_classes), scores) if n_classes > 1 else scores[0]
    g.add("probs", Softmax(), logits)
    g.set_outputs("probs")
    return g


def stock(name, **kw) -> LayerGraph:
    """Build one of the named stock topologies."""
    if name == "cnn-part-regression":
        g = LayerGraph({"pair": (2 * FRAME_CHANNELS, kw.get("rows", 64), kw.get("cols", 360))}, kw.get("dtype", np.float64))
        g.set_outputs(cnn_part(g, "pair", "p", "regression", kw.get("channels", DEFAULT_CHANNELS)))
        return g
    if name == "cnn-part-classification":
        g = LayerGraph({"pair": (2 * FRAME_CHANNELS, kw.get("rows", 64), kw.get("cols", 1800))}, kw.get("dtype", np.float64))
        g.set_outputs(cnn_part(g, "pair", "p", "classification", kw.get("channels", DEFAULT_CHANNELS)))
        return g
    if name == "regression-head":
        return regression_network(**kw)
    if name == "classification-head":
        return classification_network(**kw)
    raise ValueError(f"unknown stock topology {name!r}; choose from {STOCK_TOPOLOGIES}")
