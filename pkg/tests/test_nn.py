import math

import numpy as np
import pytest

from lidarodom import kernels
from lidarodom.errors import DivergenceError, IncompatibleWeightsError, ShapeError, UsageError
from lidarodom.nn import (
    SGD,
    Concat,
    Conv2D,
    FullyConnected,
    LayerGraph,
    MaxPool2D,
    ReLU,
    Softmax,
    cross_entropy,
    load_weights,
    mse,
    regression_network,
    save_weights,
    stock,
    train_step,
)

from .oracles import finite_difference_check, naive_conv2d, naive_maxpool


def tiny_graph(kind, seed=0):
    """Small graph exercising one layer type between a conv front and an FC back."""
    g = LayerGraph({"a": (2, 6, 8), "b": (2, 6, 8)})
    g.add("pair", Concat(2), ["a", "b"])
    if kind == "conv2d":
        g.add("x", Conv2D(4, 3, kernel=(3, 5), stride=(1, 2), padding=(1, 2)), "pair")
    elif kind == "relu":
        g.add("c", Conv2D(4, 3, kernel=3, padding=1), "pair")
        g.add("x", ReLU(), "c")
    elif kind == "maxpool":
        g.add("c", Conv2D(4, 3, kernel=3, padding=1), "pair")
        g.add("x", MaxPool2D(), "c")
    elif kind == "concat":
        g.add("c1", Conv2D(4, 2, kernel=3, padding=1), "pair")
        g.add("c2", Conv2D(4, 2, kernel=3, padding=1), "pair", param_key="c1")
        g.add("x", Concat(2), ["c1", "c2"])
    else:
        g.add("x", Conv2D(4, 2, kernel=3), "pair")
    n = int(np.prod(g.shapes["x"]))
    g.add("fc", FullyConnected(n, 3), "x")
    if kind == "softmax":
        g.add("out", Softmax(), "fc")
        g.set_outputs("out")
    else:
        g.set_outputs("fc")
    g.initialize(seed)
    rng = np.random.default_rng(seed + 100)
    for p in g.params.values():
        p["bias"][...] = rng.normal(scale=0.1, size=p["bias"].shape)
    return g


@pytest.mark.parametrize("kind", ["conv2d", "relu", "maxpool", "concat", "fully_connected", "softmax"])
def test_gradients_match_finite_differences(kind):
    g = tiny_graph(kind)
    rng = np.random.default_rng(7)
    feed = {"a": rng.normal(size=(3, 2, 6, 8)), "b": rng.normal(size=(3, 2, 6, 8))}
    out = g.outputs[0]
    if kind == "softmax":
        target = np.array([0, 2, 1])
        loss = cross_entropy
    else:
        target = rng.normal(size=(3, 3))
        loss = mse
    worst = finite_difference_check(g, feed, out, loss, target, eps=1e-5)
    assert worst < 1e-4


def test_conv_identity_kernel():
    g = LayerGraph({"x": (1, 4, 5)})
    g.add("c", Conv2D(1, 1, kernel=1), "x")
    g.set_outputs("c")
    g.params["c"]["weight"][...] = 1.0
    x = np.random.default_rng(0).normal(size=(2, 1, 4, 5))
    assert np.array_equal(g.forward({"x": x})["c"], x)


def test_maxpool_small():
    g = LayerGraph({"x": (1, 2, 2)})
    g.add("p", MaxPool2D(), "x")
    g.set_outputs("p")
    out = g.forward({"x": np.array([[[[1.0, 2.0], [3.0, 4.0]]]])})["p"]
    assert out.shape == (1, 1, 1, 1) and out[0, 0, 0, 0] == 4.0


def test_random_three_layer_graph_matches_naive_oracle():
    rng = np.random.default_rng(3)
    g = LayerGraph({"x": (3, 9, 11)})
    g.add("c1", Conv2D(3, 4, kernel=(3, 3), stride=1, padding=1), "x")
    g.add("r1", ReLU(), "c1")
    g.add("c2", Conv2D(4, 5, kernel=(2, 4), stride=(1, 2), padding=(0, 1)), "r1")
    g.add("p", MaxPool2D(), "c2")
    g.add("c3", Conv2D(5, 2, kernel=(2, 2), stride=1, padding=0), "p")
    g.set_outputs("c3")
    g.initialize(1)
    for p in g.params.values():
        p["bias"][...] = rng.normal(size=p["bias"].shape)
    x = rng.normal(size=(2, 3, 9, 11))
    prm = g.params
    h = np.maximum(naive_conv2d(x, prm["c1"]["weight"], prm["c1"]["bias"], (1, 1), (1, 1)), 0)
    h = naive_maxpool(naive_conv2d(h, prm["c2"]["weight"], prm["c2"]["bias"], (1, 2), (0, 1)))
    h = naive_conv2d(h, prm["c3"]["weight"], prm["c3"]["bias"], (1, 1), (0, 0))
    assert np.max(np.abs(g.forward({"x": x})["c3"] - h)) < 1e-10


def test_shape_error_names_layer():
    g = LayerGraph({"x": (3, 8, 8)})
    with pytest.raises(ShapeError, match="'bad'"):
        g.add("bad", Conv2D(4, 2, kernel=3), "x")
    g.add("c", Conv2D(3, 2, kernel=3), "x")
    with pytest.raises(ShapeError, match="'fc'"):
        g.add("fc", FullyConnected(10, 2), "c")


def test_forward_rejects_wrong_input_shape():
    g = stock("cnn-part-regression")
    with pytest.raises(ShapeError):
        g.forward({"pair": np.zeros((1, 6, 64, 361))})


def test_stock_regression_part_shape():
    g = stock("cnn-part-regression")
    assert g.shapes[g.outputs[0]] == (64, 8, 45)


def test_stock_classification_part_shape():
    g = stock("cnn-part-classification")
    assert g.shapes[g.outputs[0]] == (64, 8, 45)


@pytest.mark.parametrize("size,kernel,stride,pad", [(360, 3, 1, 0), (1800, 15, 5, 5), (64, 3, 1, 1), (31, 4, 3, 0)])
def test_conv_width_formula(size, kernel, stride, pad):
    conv = Conv2D(1, 1, kernel=(1, kernel), stride=(1, stride), padding=(0, pad))
    assert conv.infer_shape([(1, 1, size)])[2] == (size + 2 * pad - kernel) // stride + 1


def test_softmax_sums_to_one():
    g = LayerGraph({"x": (7,)})
    g.add("s", Softmax(), "x")
    g.set_outputs("s")
    x = np.random.default_rng(0).normal(scale=30, size=(50, 7))
    p = g.forward({"x": x})["s"]
    assert np.all(p > 0)
    assert np.max(np.abs(p.sum(axis=1) - 1)) < 1e-12


# -- backward ------------------------------------------------------------------


def test_zero_upstream_gives_zero_gradients():
    g = tiny_graph("relu")
    rng = np.random.default_rng(0)
    feed = {"a": rng.normal(size=(2, 2, 6, 8)), "b": rng.normal(size=(2, 2, 6, 8))}
    out = g.forward(feed, training=True)[g.outputs[0]]
    grads = g.backward({g.outputs[0]: np.zeros_like(out)})
    assert all(not np.any(v) for p in grads.values() for v in p.values())


def test_backward_without_cache():
    g = tiny_graph("relu")
    with pytest.raises(UsageError):
        g.backward({g.outputs[0]: np.zeros((1, 3))})


def test_shared_branch_doubles_gradient():
    def build(branches):
        g = LayerGraph({"x": (2, 5, 5)})
        outs = []
        for b in range(branches):
            outs.append(g.add(f"c{b}", Conv2D(2, 3, kernel=3), "x", param_key="shared"))
        g.add("cat", Concat(branches), outs) if branches > 1 else None
        last = "cat" if branches > 1 else "c0"
        g.add("fc", FullyConnected(int(np.prod(g.shapes[last])), 1), last, param_key="fc")
        g.set_outputs("fc")
        return g

    one, two = build(1), build(2)
    one.initialize(0)
    two.initialize(0)
    w = one.params["fc"]["weight"]
    two.params["shared"]["weight"][...] = one.params["shared"]["weight"]
    two.params["fc"]["weight"][...] = np.concatenate([w, w], axis=1)
    x = np.random.default_rng(1).normal(size=(2, 2, 5, 5))
    g1 = one.forward({"x": x}, training=True)["fc"]
    g2 = two.forward({"x": x}, training=True)["fc"]
    assert np.allclose(g2, 2 * g1)
    d1 = one.backward({"fc": np.ones_like(g1)})
    d2 = two.backward({"fc": np.ones_like(g2)})
    assert np.allclose(d2["shared"]["weight"], 2 * d1["shared"]["weight"], rtol=1e-12, atol=1e-12)


# -- train_step ------------------------------------------------------------------


def small_regressor(seed=0):
    g = LayerGraph({"x": (2, 6, 6)})
    g.add("c", Conv2D(2, 4, kernel=3, padding=1), "x")
    g.add("r", ReLU(), "c")
    g.add("p", MaxPool2D(), "r")
    g.add("fc", FullyConnected(4 * 3 * 3, 3), "p")
    g.set_outputs("fc")
    return g.initialize(seed)


def test_lr_zero_leaves_parameters():
    g = small_regressor()
    rng = np.random.default_rng(0)
    batch = ({"x": rng.normal(size=(4, 2, 6, 6))}, rng.normal(size=(4, 3)))
    before = {k: {n: v.copy() for n, v in p.items()} for k, p in g.params.items()}
    opt = SGD(lr=0.0, momentum=0.9)
    l1 = train_step(g, batch, "mse", opt)
    l2 = train_step(g, batch, "mse", opt)
    assert l1 == l2
    for k, p in g.params.items():
        for n, v in p.items():
            assert np.array_equal(v, before[k][n])


def test_single_sample_overfit():
    g = small_regressor(1)
    rng = np.random.default_rng(2)
    batch = ({"x": rng.normal(size=(1, 2, 6, 6))}, np.array([[0.1, 0.0, 1.0]]))
    opt = SGD(lr=0.01, momentum=0.9)
    for _ in range(500):
        loss = train_step(g, batch, "mse", opt)
    final = mse(g.forward(batch[0])["fc"], batch[1])[0]
    assert final < 1e-6, loss


def test_cross_entropy_of_uniform_is_log_k():
    k = 56
    p = np.full((3, k), 1.0 / k)
    loss, _ = cross_entropy(p, np.array([0, 5, 55]))
    assert loss == pytest.approx(math.log(k), abs=1e-12)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_cross_entropy_survives_zero_probability(dtype):
    p = np.array([[0.0, 1.0], [0.5, 0.5]], dtype=dtype)
    loss, grad = cross_entropy(p, np.array([0, 1]))
    assert math.isfinite(loss) and np.all(np.isfinite(grad))
    assert loss > 30


def test_divergence_tripwire():
    g = small_regressor()
    batch = ({"x": np.full((1, 2, 6, 6), np.inf)}, np.zeros((1, 3)))
    with pytest.raises(DivergenceError), np.errstate(invalid="ignore"):
        train_step(g, batch, "mse", SGD())


def test_training_is_deterministic():
    def run():
        g = small_regressor(3)
        rng = np.random.default_rng(4)
        opt = SGD(lr=0.01, momentum=0.9)
        for _ in range(20):
            train_step(g, ({"x": rng.normal(size=(4, 2, 6, 6))}, rng.normal(size=(4, 3))), "mse", opt)
        return save_weights(g)

    assert run() == run()


# -- weights --------------------------------------------------------------------


def test_weight_round_trip_bit_identical():
    g = regression_network(2, dtype=np.float32).initialize(5)
    buf = save_weights(g)
    assert buf[:4] == b"ODNW"
    h = load_weights(buf)
    x = {k: np.random.default_rng(0).normal(size=(1,) + s).astype(np.float32) for k, s in g.input_shapes.items()}
    assert np.array_equal(g.forward(x)["motion"], h.forward(x)["motion"])
    assert save_weights(h) == buf


def test_truncated_stream():
    buf = save_weights(small_regressor())
    for cut in (3, 10, len(buf) // 2, len(buf) - 1):
        with pytest.raises(IncompatibleWeightsError):
            load_weights(buf[:cut])


def test_version_mismatch():
    buf = bytearray(save_weights(small_regressor()))
    buf[4] = 99
    with pytest.raises(IncompatibleWeightsError, match="version"):
        load_weights(bytes(buf))


def test_float64_weights_in_float32_mode():
    g = small_regressor(6)
    rng = np.random.default_rng(6)
    opt = SGD(lr=0.01, momentum=0.9)
    batch = ({"x": rng.normal(size=(8, 2, 6, 6))}, rng.normal(size=(8, 3)))
    for _ in range(30):
        train_step(g, batch, "mse", opt)
    h = load_weights(save_weights(g), dtype=np.float32)
    assert h.dtype == np.float32
    x = {"x": rng.normal(size=(8, 2, 6, 6))}
    assert np.max(np.abs(g.forward(x)["fc"] - h.forward(x)["fc"])) < 1e-4


# -- numba / numpy pooling kernels agree -------------------------------------------


def test_pool_kernels_agree():
    x = np.random.default_rng(0).normal(size=(2, 3, 7, 10))
    a, ia = kernels.maxpool_forward_np(x)
    b, ib = kernels.maxpool_forward_jit(x)
    assert np.array_equal(a, b) and np.array_equal(ia, ib)
    g = np.random.default_rng(1).normal(size=a.shape)
    assert np.array_equal(kernels.maxpool_backward_np(g, ia, x.shape), kernels.maxpool_backward_jit(g, ib, x.shape))


def naive_cnn_part(x, params, kind):
    h = x
    for i in range(3):
        p = params[f"cnn.conv{i + 1}"]
        if i == 0 and kind == "classification":
            h = naive_conv2d(h, p["weight"], p["bias"], (1, 5), (1, 5))
        else:
            h = naive_conv2d(h, p["weight"], p["bias"], (1, 1), (1, 1))
        h = naive_maxpool(np.maximum(h, 0))
    return h


@pytest.mark.parametrize("kind,cols", [("regression", 24), ("classification", 120)])
def test_stock_cnn_part_matches_naive_convolution(kind, cols):
    g = stock(f"cnn-part-{kind}", rows=8, cols=cols, channels=(4, 6, 8))
    g.initialize(2)
    rng = np.random.default_rng(2)
    for p in g.params.values():
        p["bias"][...] = rng.normal(scale=0.1, size=p["bias"].shape)
    x = rng.normal(size=(2, 6, 8, cols))
    got = g.forward({"pair": x})[g.outputs[0]]
    assert np.max(np.abs(got - naive_cnn_part(x, g.params, kind))) < 1e-10
