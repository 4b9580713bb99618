"""Layer graph with named parameter sharing.

Nodes run in insertion order. Each node that owns parameters refers to them
through a parameter key; several nodes may use the same key, in which case
they read one buffer and their gradients are summed into one gradient buffer.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError, UsageError
from .layers import Layer

DEBUG_NAN = os.environ.get("LIDARODOM_DEBUG", "0") not in ("0", "", "false")


@dataclass
class Node:
    name: str
    layer: Layer
    inputs: list
    param_key: str | None = None


@dataclass
class LayerGraph:
    input_shapes: dict
    dtype: type = np.float64
    nodes: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    shapes: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)  # key -> {"weight": arr, "bias": arr}
    param_layers: dict = field(default_factory=dict)  # key -> first Layer declaring it

    def __post_init__(self):
        self.input_shapes = {k: tuple(int(d) for d in v) for k, v in self.input_shapes.items()}
        self.shapes.update(self.input_shapes)
        self.grads = {}
        self._cache = None
        self.debug = DEBUG_NAN

    # -- construction -------------------------------------------------------

    def add(self, name, layer: Layer, inputs, param_key=None) -> str:
        if name in self.shapes:
            raise ShapeError(f"duplicate node name {name!r}")
        inputs = [inputs] if isinstance(inputs, str) else list(inputs)
        for src in inputs:
            if src not in self.shapes:
                raise ShapeError(f"layer {name!r}: unknown input {src!r}")
        try:
            shape = layer.infer_shape([self.shapes[s] for s in inputs])
        except ShapeError as exc:
            raise ShapeError(f"layer {name!r} ({layer.kind}): {exc}") from None
        pshapes = layer.param_shapes()
        if pshapes:
            param_key = param_key or name
            if param_key in self.param_layers:
                owner = self.param_layers[param_key]
                if owner.param_shapes() != pshapes:
                    raise ShapeError(
                        f"layer {name!r}: shared parameters {param_key!r} have shapes "
                        f"{owner.param_shapes()}, layer needs {pshapes}"
                    )
            else:
                self.param_layers[param_key] = layer
                self.params[param_key] = {
                    k: np.zeros(s, dtype=self.dtype) for k, s in pshapes.items()
                }
        else:
            param_key = None
        self.nodes.append(Node(name, layer, inputs, param_key))
        self.shapes[name] = tuple(shape)
        return name

    def set_outputs(self, *names):
        for n in names:
            if n not in self.shapes:
                raise ShapeError(f"unknown output node {n!r}")
        self.outputs = list(names)

    def initialize(self, seed=0):
        """He-style uniform fan-in initialisation, biases zero, in declaration order."""
        rng = np.random.default_rng(seed)
        for key, layer in self.param_layers.items():
            limit = np.sqrt(6.0 / layer.fan_in())
            p = self.params[key]
            p["weight"][...] = rng.uniform(-limit, limit, size=p["weight"].shape)
            p["bias"][...] = 0.0
        return self

    def astype(self, dtype) -> LayerGraph:
        g = LayerGraph(self.input_shapes, dtype)
        for node in self.nodes:
            g.add(node.name, node.layer, node.inputs, node.param_key)
        g.set_outputs(*self.outputs)
        for key, p in self.params.items():
            for k, v in p.items():
                g.params[key][k][...] = v.astype(dtype)
        return g

    def parameter_count(self):
        return sum(v.size for p in self.params.values() for v in p.values())

    def flat_parameters(self):
        return [(f"{key}.{k}", v) for key, p in self.params.items() for k, v in p.items()]

    # -- execution ----------------------------------------------------------

    def _check_feed(self, feed):
        batch = None
        for name, shape in self.input_shapes.items():
            if name not in feed:
                raise ShapeError(f"missing graph input {name!r}")
            x = feed[name]
            if tuple(x.shape[1:]) != shape:
                raise ShapeError(f"input {name!r}: expected (B,)+{shape}, got {x.shape}")
            if batch is None:
                batch = x.shape[0]
            elif x.shape[0] != batch:
                raise ShapeError(f"input {name!r}: batch size {x.shape[0]} != {batch}")

    def forward(self, feed: dict, training=False) -> dict:
        self._check_feed(feed)
        acts = {k: np.asarray(feed[k], dtype=self.dtype) for k in self.input_shapes}
        caches = {}
        last_use = {} if training else self._last_use()
        for i, node in enumerate(self.nodes):
            params = self.params.get(node.param_key)
            out, cache = node.layer.forward([acts[s] for s in node.inputs], params)
            if self.debug and not np.all(np.isfinite(out)):
                raise FloatingPointError(f"non-finite activation after layer {node.name!r}")
            acts[node.name] = out
            if training:
                caches[node.name] = cache
            else:
                for s in node.inputs:
                    if last_use.get(s) == i:
                        acts.pop(s, None)
        self._cache = caches if training else None
        return {name: acts[name] for name in self.outputs}

    def _last_use(self):
        last = {}
        for i, node in enumerate(self.nodes):
            for s in node.inputs:
                last[s] = i
        for name in self.outputs:
            last.pop(name, None)
        for name in self.input_shapes:
            last.pop(name, None)
        return last

    def zero_grads(self):
        self.grads = {key: {k: np.zeros_like(v) for k, v in p.items()} for key, p in self.params.items()}
        return self.grads

    def backward(self, grad_outputs: dict) -> dict:
        """Gradients of all parameters given upstream gradients of the outputs.

        Requires the cache of a preceding ``forward(..., training=True)``.
        Returns ``{param_key: {"weight": ..., "bias": ...}}``.
        """
        if self._cache is None:
            raise UsageError("backward() needs a forward(training=True) cache")
        grads = self.zero_grads()
        upstream = {k: np.asarray(v, dtype=self.dtype) for k, v in grad_outputs.items()}
        for node in reversed(self.nodes):
            g = upstream.pop(node.name, None)
            if g is None:
                continue
            pgrads = grads.get(node.param_key)
            in_grads = node.layer.backward(g, self._cache[node.name], self.params.get(node.param_key), pgrads)
            for src, gi in zip(node.inputs, in_grads):
                if src in self.input_shapes:
                    continue
                if src in upstream:
                    upstream[src] = upstream[src] + gi
                else:
                    upstream[src] = gi
        return grads
