"""Weight file format.

Layout (little-endian)::

    b"ODNW"  u32 version
    u32 n_inputs   { str name, u32 ndim, u32 dims[ndim] }
    u32 n_nodes    { u32 len, utf-8 JSON record {name, type, inputs, param_key, attrs} }
    u32 n_outputs  { str name }
    u32 n_params   { str key, u32 ndim, u32 dims[ndim], f32 data[prod(dims)] }

where ``str`` is a u32 byte length followed by utf-8 bytes. Parameter buffers
follow declaration order (weight before bias for each key).
"""
from __future__ import annotations

import json
import struct

import numpy as np

from ..errors import IncompatibleWeightsError, ShapeError
from .graph import LayerGraph
from .layers import layer_from_record

MAGIC = b"ODNW"
VERSION = 1
_U32 = struct.Struct("<I")


class _Reader:
    def __init__(self, buf):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise IncompatibleWeightsError(
                f"weight stream truncated at byte {self.pos} (needed {n} more, have {len(self.buf) - self.pos})"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return _U32.unpack(self.take(4))[0]

    def str(self):
        return bytes(self.take(self.u32())).decode("utf-8")

    def dims(self):
        return tuple(self.u32() for _ in range(self.u32()))


def _str(s):
    b = s.encode("utf-8")
    return _U32.pack(len(b)) + b


def _dims(shape):
    return _U32.pack(len(shape)) + b"".join(_U32.pack(int(d)) for d in shape)


def save_weights(graph: LayerGraph) -> bytes:
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(graph.input_shapes))]
    for name, shape in graph.input_shapes.items():
        parts += [_str(name), _dims(shape)]
    parts.append(_U32.pack(len(graph.nodes)))
    for node in graph.nodes:
        rec = json.dumps(
            {
                "name": node.name,
                "type": node.layer.kind,
                "inputs": node.inputs,
                "param_key": node.param_key,
                "attrs": node.layer.attrs(),
            },
            sort_keys=True,
            separators=(",", ":"),
        ).encode("utf-8")
        parts += [_U32.pack(len(rec)), rec]
    parts.append(_U32.pack(len(graph.outputs)))
    parts += [_str(n) for n in graph.outputs]
    flat = graph.flat_parameters()
    parts.append(_U32.pack(len(flat)))
    for key, value in flat:
        parts += [_str(key), _dims(value.shape), np.ascontiguousarray(value, dtype="<f4").tobytes()]
    return b"".join(parts)


def load_weights(buf: bytes, dtype=np.float32) -> LayerGraph:
    r = _Reader(buf)
    if bytes(r.take(4)) != MAGIC:
        raise IncompatibleWeightsError("not an ODNW weight stream (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise IncompatibleWeightsError(f"unsupported weight format version {version} (expected {VERSION})")
    inputs = {}
    for _ in range(r.u32()):
        name = r.str()
        inputs[name] = r.dims()
    graph = LayerGraph(inputs, dtype)
    try:
        for _ in range(r.u32()):
            rec = json.loads(bytes(r.take(r.u32())).decode("utf-8"))
            layer = layer_from_record(rec["type"], rec["attrs"])
            graph.add(rec["name"], layer, rec["inputs"], rec["param_key"])
        graph.set_outputs(*[r.str() for _ in range(r.u32())])
    except (ShapeError, KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, IncompatibleWeightsError):
            raise
        raise IncompatibleWeightsError(f"invalid topology record: {exc}") from None
    expected = graph.flat_parameters()
    count = r.u32()
    if count != len(expected):
        raise IncompatibleWeightsError(f"stream has {count} parameter buffers, topology needs {len(expected)}")
    for key, target in expected:
        got_key = r.str()
        shape = r.dims()
        if got_key != key or shape != target.shape:
            raise IncompatibleWeightsError(
                f"parameter {got_key!r} {shape} does not match topology {key!r} {target.shape}"
            )
        n = int(np.prod(shape))
        target[...] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(dtype)
    if r.pos != len(r.buf):
        raise IncompatibleWeightsError(f"{len(r.buf) - r.pos} trailing bytes after parameters")
    return graph


def load_into(graph: LayerGraph, buf: bytes) -> LayerGraph:
    """Copy weights from ``buf`` into an existing graph with identical topology."""
    loaded = load_weights(buf, graph.dtype)
    if [(n.name, n.layer.kind, n.param_key) for n in loaded.nodes] != [
        (n.name, n.layer.kind, n.param_key) for n in graph.nodes
    ]:
        raise IncompatibleWeightsError("weight stream topology differs from the target graph")
    for key, p in loaded.params.items():
        for k, v in p.items():
            graph.params[key][k][...] = v
    return graph
