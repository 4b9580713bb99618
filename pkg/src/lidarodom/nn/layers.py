"""Layer vocabulary: conv2d, relu, maxpool, fully_connected, softmax, concat.

Tensors carry a leading batch axis: images are (B, C, H, W), vectors (B, n).
Shapes handled by ``infer_shape`` exclude the batch axis.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .. import kernels
from ..errors import ShapeError


def _pair(v):
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


class Layer:
    kind = "layer"
    n_inputs = 1

    def param_shapes(self) -> dict:
        return {}

    def fan_in(self) -> int:
        return 1

    def attrs(self) -> dict:
        return {}

    def infer_shape(self, shapes):
        raise NotImplementedError

    def forward(self, xs, params):
        """Returns (output, cache)."""
        raise NotImplementedError

    def backward(self, grad, cache, params, grads):
        """Returns input gradients; accumulates parameter gradients into ``grads``."""
        raise NotImplementedError


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(self, in_ch, out_ch, kernel=3, stride=1, padding=0):
        self.in_ch = int(in_ch)
        self.out_ch = int(out_ch)
        self.kernel = _pair(kernel)
        self.stride = _pair(stride)
        self.padding = _pair(padding)

    def attrs(self):
        return {
            "in_ch": self.in_ch,
            "out_ch": self.out_ch,
            "kernel": list(self.kernel),
            "stride": list(self.stride),
            "padding": list(self.padding),
        }

    def param_shapes(self):
        return {"weight": (self.out_ch, self.in_ch) + self.kernel, "bias": (self.out_ch,)}

    def fan_in(self):
        return self.in_ch * self.kernel[0] * self.kernel[1]

    def out_hw(self, h, w):
        (kh, kw), (sh, sw), (ph, pw) = self.kernel, self.stride, self.padding
        return (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1

    def infer_shape(self, shapes):
        (s,) = shapes
        if len(s) != 3 or s[0] != self.in_ch:
            raise ShapeError(f"expects (C={self.in_ch}, H, W) input, got {s}")
        ho, wo = self.out_hw(s[1], s[2])
        if ho < 1 or wo < 1:
            raise ShapeError(f"kernel {self.kernel} does not fit input {s}")
        return (self.out_ch, ho, wo)

    def _columns(self, xp, ho, wo):
        (kh, kw), (sh, sw) = self.kernel, self.stride
        b, c = xp.shape[:2]
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, : sh * (ho - 1) + 1 : sh, : sw * (wo - 1) + 1 : sw]
        # (B, C, Ho, Wo, kh, kw) -> (C*kh*kw, B*Ho*Wo)
        return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * kh * kw, b * ho * wo)

    def _pad(self, x):
        ph, pw = self.padding
        if ph or pw:
            return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        return x

    def forward(self, xs, params):
        (x,) = xs
        w, bias = params["weight"], params["bias"]
        b = x.shape[0]
        ho, wo = self.out_hw(x.shape[2], x.shape[3])
        xp = self._pad(x)
        cols = self._columns(xp, ho, wo)
        out = (w.reshape(self.out_ch, -1) @ cols).reshape(self.out_ch, b, ho, wo)
        out = out.transpose(1, 0, 2, 3) + bias[None, :, None, None]
        return np.ascontiguousarray(out), (x.shape, xp)

    def backward(self, grad, cache, params, grads):
        in_shape, xp = cache
        w = params["weight"]
        b, o, ho, wo = grad.shape
        (kh, kw), (sh, sw), (ph, pw) = self.kernel, self.stride, self.padding
        g2 = np.ascontiguousarray(grad.transpose(1, 0, 2, 3)).reshape(o, -1)
        cols = self._columns(xp, ho, wo)
        grads["weight"] += (g2 @ cols.T).reshape(w.shape)
        grads["bias"] += g2.sum(axis=1)
        dcols = (w.reshape(o, -1).T @ g2).reshape(self.in_ch, kh, kw, b, ho, wo)
        dxp = np.zeros(xp.shape, dtype=grad.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += dcols[:, i, j].transpose(1, 0, 2, 3)
        h, wd = in_shape[2], in_shape[3]
        return [dxp[:, :, ph : ph + h, pw : pw + wd]]


class ReLU(Layer):
    kind = "relu"

    def infer_shape(self, shapes):
        return tuple(shapes[0])

    def forward(self, xs, params):
        (x,) = xs
        pos = x > 0
        return x * pos, pos

    def backward(self, grad, cache, params, grads):
        return [grad * cache]


class MaxPool2D(Layer):
    """2x2 window, stride 2; a trailing odd row/column is dropped."""

    kind = "maxpool"

    def infer_shape(self, shapes):
        (s,) = shapes
        if len(s) != 3 or s[1] < 2 or s[2] < 2:
            raise ShapeError(f"expects (C, H>=2, W>=2) input, got {s}")
        return (s[0], s[1] // 2, s[2] // 2)

    def forward(self, xs, params):
        (x,) = xs
        out, arg = kernels.maxpool_forward(np.ascontiguousarray(x))
        return out, (arg, x.shape)

    def backward(self, grad, cache, params, grads):
        arg, shape = cache
        return [kernels.maxpool_backward(np.ascontiguousarray(grad), arg, shape)]


class FullyConnected(Layer):
    """Affine map on the flattened input."""

    kind = "fully_connected"

    def __init__(self, in_features, out_features):
        self.in_features = int(in_features)
        self.out_features = int(out_features)

    def attrs(self):
        return {"in_features": self.in_features, "out_features": self.out_features}

    def param_shapes(self):
        return {"weight": (self.out_features, self.in_features), "bias": (self.out_features,)}

    def fan_in(self):
        return self.in_features

    def infer_shape(self, shapes):
        (s,) = shapes
        n = int(np.prod(s))
        if n != self.in_features:
            raise ShapeError(f"expects {self.in_features} input features, got {n} from shape {s}")
        return (self.out_features,)

    def forward(self, xs, params):
        (x,) = xs
        flat = x.reshape(x.shape[0], -1)
        return flat @ params["weight"].T + params["bias"], (x.shape, flat)

    def backward(self, grad, cache, params, grads):
        shape, flat = cache
        grads["weight"] += grad.T @ flat
        grads["bias"] += grad.sum(axis=0)
        return [(grad @ params["weight"]).reshape(shape)]


class Softmax(Layer):
    kind = "softmax"

    def infer_shape(self, shapes):
        (s,) = shapes
        if len(s) != 1:
            raise ShapeError(f"expects a vector input, got {s}")
        return tuple(s)

    def forward(self, xs, params):
        (x,) = xs
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=1, keepdims=True)
        return p, p

    def backward(self, grad, cache, params, grads):
        p = cache
        return [p * (grad - (grad * p).sum(axis=1, keepdims=True))]


class Concat(Layer):
    """Concatenate along the first non-batch axis (channels or features)."""

    kind = "concat"

    def __init__(self, n_inputs=2):
        self.n_inputs = int(n_inputs)

    def attrs(self):
        return {"n_inputs": self.n_inputs}

    def infer_shape(self, shapes):
        if len(shapes) != self.n_inputs:
            raise ShapeError(f"expects {self.n_inputs} inputs, got {len(shapes)}")
        first = shapes[0]
        for s in shapes[1:]:
            if len(s) != len(first) or tuple(s[1:]) != tuple(first[1:]):
                raise ShapeError(f"cannot concatenate shapes {first} and {s}")
        return (sum(s[0] for s in shapes),) + tuple(first[1:])

    def forward(self, xs, params):
        return np.concatenate(xs, axis=1), [x.shape[1] for x in xs]

    def backward(self, grad, cache, params, grads):
        splits = np.cumsum(cache)[:-1]
        return np.split(grad, splits, axis=1)


LAYER_TYPES = {
    cls.kind: cls for cls in (Conv2D, ReLU, MaxPool2D, FullyConnected, Softmax, Concat)
}


def layer_from_record(kind, attrs):
    if kind not in LAYER_TYPES:
        raise ShapeError(f"unknown layer type {kind!r}")
    return LAYER_TYPES[kind](**attrs)
