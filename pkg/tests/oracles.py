"""Slow, obviously-correct reference implementations used by the tests."""
import numpy as np

from lidarodom.nn.train import LOSSES


def naive_conv2d(x, w, b, stride, pad):
    """Direct six-loop convolution (cross-correlation), zero padding."""
    bsz, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    sh, sw = stride
    ph, pw = pad
    xp = np.zeros((bsz, cin, h + 2 * ph, wd + 2 * pw))
    xp[:, :, ph : ph + h, pw : pw + wd] = x
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (wd + 2 * pw - kw) // sw + 1
    out = np.zeros((bsz, cout, oh, ow))
    for n in range(bsz):
        for o in range(cout):
            for i in range(oh):
                for j in range(ow):
                    acc = b[o]
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += w[o, c, u, v] * xp[n, c, i * sh + u, j * sw + v]
                    out[n, o, i, j] = acc
    return out


def naive_maxpool(x):
    bsz, c, h, w = x.shape
    out = np.empty((bsz, c, h // 2, w // 2))
    for i in range(h // 2):
        for j in range(w // 2):
            out[:, :, i, j] = x[:, :, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2].max(axis=(2, 3))
    return out


def finite_difference_check(graph, feed, output, loss, target, eps=1e-5, per_tensor=25, seed=0):
    """Worst relative error between backprop and central differences, over a
    random subset of entries of every parameter tensor."""
    loss_fn = LOSSES[loss] if isinstance(loss, str) else loss

    def value():
        return loss_fn(graph.forward(feed)[output], target)[0]

    pred = graph.forward(feed, training=True)[output]
    grads = graph.backward({output: loss_fn(pred, target)[1]})
    rng = np.random.default_rng(seed)
    worst = 0.0
    for key, p in graph.params.items():
        for name, arr in p.items():
            flat = arr.reshape(-1)
            picks = rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False)
            for i in picks:
                old = flat[i]
                flat[i] = old + eps
                up = value()
                flat[i] = old - eps
                down = value()
                flat[i] = old
                numeric = (up - down) / (2 * eps)
                analytic = grads[key][name].reshape(-1)[i]
                err = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-8)
                worst = max(worst, err)
    return worst
