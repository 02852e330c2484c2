"""NN engine: forward oracles, exact gradients, optimizer, checkpoints."""

import numpy as np
import pytest
from scipy import signal

from swimbout.nncore import (Adam, CheckpointError, Conv2d, Dropout, Flatten,
                             Linear, LogSoftmax, MaxPool2d, ReLU, Sequential,
                             ShapeError, check_finite, col2im,
                             conv2d_forward, conv2d_forward_naive, im2col,
                             load_checkpoint, lr_schedule, nll_loss,
                             nll_loss_grad, save_checkpoint)

RNG = np.random.default_rng(462019)


def numeric_grad(fn, x, eps=1e-6):
    """Central finite differences of a scalar function, element by element."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn()
        flat[i] = orig - eps
        lo = fn()
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * eps)
    return g


def check_layer_gradients(layer, x, rtol=1e-6):
    """Compare backward() against finite differences for input and params."""
    rng = np.random.default_rng(7)
    out, cache = layer.forward(x, mode="train", rng=np.random.default_rng(0))
    weights = rng.normal(size=out.shape)

    def objective():
        o, _ = layer.forward(x, mode="train", rng=np.random.default_rng(0))
        return float((o * weights).sum())

    dx, pgrads = layer.backward(cache, weights.astype(out.dtype))
    num_dx = numeric_grad(objective, x)
    np.testing.assert_allclose(dx, num_dx, rtol=rtol, atol=1e-7)
    for name, arr in layer.params().items():
        num = numeric_grad(objective, arr)
        np.testing.assert_allclose(pgrads[name], num, rtol=rtol, atol=1e-7)


def test_conv_forward_matches_scipy():
    x = RNG.normal(size=(2, 3, 9, 8))
    w = RNG.normal(size=(4, 3, 3, 3))
    b = RNG.normal(size=4)
    out = conv2d_forward(x, w, b, stride=1, pad=1)
    for n in range(2):
        for o in range(4):
            ref = sum(signal.correlate2d(x[n, c], w[o, c], mode="same")
                      for c in range(3)) + b[o]
            np.testing.assert_allclose(out[n, o], ref, rtol=1e-10, atol=1e-10)


def test_conv_forward_matches_naive_strided():
    x = RNG.normal(size=(2, 2, 11, 13))
    w = RNG.normal(size=(3, 2, 5, 5))
    b = RNG.normal(size=3)
    for stride, pad in [(1, 0), (2, 2), (3, 1)]:
        fast = conv2d_forward(x, w, b, stride, pad)
        naive = conv2d_forward_naive(x, w, b, stride, pad)
        np.testing.assert_allclose(fast, naive, rtol=1e-10, atol=1e-12)


def test_im2col_col2im_adjoint():
    # col2im is the exact transpose of im2col: <im2col(x), y> == <x, col2im(y)>
    x = RNG.normal(size=(2, 3, 7, 6))
    cols = im2col(x, 3, 3, stride=2, pad=1)
    y = RNG.normal(size=cols.shape)
    lhs = float((cols * y).sum())
    rhs = float((x * col2im(y, x.shape, 3, 3, stride=2, pad=1)).sum())
    assert abs(lhs - rhs) < 1e-9


def test_conv_gradients():
    layer = Conv2d(2, 3, kernel=3, stride=2, pad=1, dtype=np.float64)
    layer.init_he(np.random.default_rng(1))
    check_layer_gradients(layer, RNG.normal(size=(2, 2, 7, 7)))


def test_linear_gradients():
    layer = Linear(6, 4, dtype=np.float64)
    layer.init_he(np.random.default_rng(2))
    check_layer_gradients(layer, RNG.normal(size=(3, 6)))


def test_maxpool_forward_and_gradient():
    x = RNG.normal(size=(2, 2, 6, 6))
    layer = MaxPool2d(kernel=2, stride=2)
    out, _ = layer.forward(x)
    ref = x.reshape(2, 2, 3, 2, 3, 2).max(axis=(3, 5))
    np.testing.assert_allclose(out, ref)
    # ties are measure-zero for continuous inputs, so FD is valid
    check_layer_gradients(layer, x)


def test_maxpool_padding_uses_neg_inf():
    x = -np.ones((1, 1, 3, 3))
    out, _ = MaxPool2d(kernel=2, stride=2, pad=1).forward(x)
    assert out.shape == (1, 1, 2, 2)
    assert (out == -1).all()  # padding never wins the max


def test_relu_and_flatten_gradients():
    check_layer_gradients(ReLU(), RNG.normal(size=(3, 4)) + 0.01)
    check_layer_gradients(Flatten(), RNG.normal(size=(2, 3, 4, 5)))


def test_logsoftmax_forward_and_gradient():
    x = RNG.normal(size=(4, 5)) * 10
    out, _ = LogSoftmax().forward(x)
    np.testing.assert_allclose(np.exp(out).sum(axis=1), 1.0, rtol=1e-12)
    check_layer_gradients(LogSoftmax(), x.copy())


def test_dropout_semantics():
    x = np.ones((200, 50))
    layer = Dropout(0.4)
    out, _ = layer.forward(x, mode="eval")
    assert out is x
    out, cache = layer.forward(x, mode="train", rng=np.random.default_rng(0))
    keep, scale = cache
    assert scale == pytest.approx(1.0 / 0.6)
    np.testing.assert_allclose(np.unique(out), [0.0, scale])
    assert abs(out.mean() - 1.0) < 0.02          # inverted scaling keeps E[x]
    with pytest.raises(ValueError):
        layer.forward(x, mode="train")
    with pytest.raises(ValueError):
        Dropout(1.0)


def test_nll_loss_and_grad():
    lp, _ = LogSoftmax().forward(RNG.normal(size=(5, 3)))
    labels = np.array([0, 2, 1, 1, 0])
    ref = -np.mean([lp[i, labels[i]] for i in range(5)])
    assert nll_loss(lp, labels) == pytest.approx(ref, rel=1e-12)
    g = nll_loss_grad(lp, labels)
    num = numeric_grad(lambda: nll_loss(lp, labels), lp)
    np.testing.assert_allclose(g, num, atol=1e-8)
    with pytest.raises(IndexError):
        nll_loss(lp, np.array([0, 3, 0, 0, 0]))


def test_sequential_end_to_end_gradient():
    net = Sequential([
        ("conv", Conv2d(1, 2, 3, stride=1, pad=1, dtype=np.float64)),
        ("relu", ReLU()),
        ("pool", MaxPool2d(2, 2)),
        ("flat", Flatten()),
        ("fc", Linear(2 * 3 * 3, 3, dtype=np.float64)),
        ("logsm", LogSoftmax()),
    ])
    net.init_he(np.random.default_rng(3))
    x = RNG.normal(size=(4, 1, 6, 6))
    labels = np.array([0, 1, 2, 1])

    def objective():
        out, _ = net.forward(x, mode="eval")
        return nll_loss(out, labels)

    out, caches = net.forward(x, mode="eval")
    _, grads = net.backward(caches, nll_loss_grad(out, labels))
    for lname, pg in grads.items():
        layer = dict(net.layers)[lname]
        for pname, arr in layer.params().items():
            num = numeric_grad(objective, arr)
            np.testing.assert_allclose(pg[pname], num, rtol=1e-5, atol=1e-8,
                                       err_msg=f"{lname}/{pname}")


def test_sequential_rejects_duplicate_names():
    with pytest.raises(ValueError):
        Sequential([("a", ReLU()), ("a", Flatten())])


def test_shape_errors():
    with pytest.raises(ShapeError):
        Conv2d(3, 4, 3).forward(np.zeros((1, 2, 8, 8), dtype=np.float32))
    with pytest.raises(ShapeError):
        Linear(5, 2).forward(np.zeros((1, 4), dtype=np.float32))
    with pytest.raises(ShapeError):
        Linear(5, 2).set_params({"w": np.zeros((2, 4), dtype=np.float32)})


def test_adam_matches_reference_implementation():
    rng = np.random.default_rng(11)
    p = rng.normal(size=(4, 3))
    ref = p.copy()
    opt = Adam({"x/w": p}, lr=0.01, weight_decay=0.1)
    m = np.zeros_like(ref)
    v = np.zeros_like(ref)
    for t in range(1, 8):
        g = rng.normal(size=p.shape)
        opt.step({"x/w": g})
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (
            np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        ref = ref - 0.01 * 0.1 * ref       # decoupled decay, after the step
        np.testing.assert_allclose(p, ref, rtol=1e-12, atol=1e-12)


def test_adam_skips_decay_on_biases():
    p = {"fc/w": np.ones((2, 2)), "fc/b": np.ones(2)}
    opt = Adam(p, lr=0.0, weight_decay=0.5)
    opt.lr = 0.0
    before_b = p["fc/b"].copy()
    opt.step({k: np.zeros_like(v) for k, v in p.items()}, lr=0.1)
    np.testing.assert_array_equal(p["fc/b"], before_b)
    assert (p["fc/w"] < 1.0).all()


def test_lr_schedule():
    assert lr_schedule(1.0, 1) == 1.0
    assert lr_schedule(1.0, 2) == pytest.approx(1 / np.sqrt(2))
    assert lr_schedule(1.0, 4) == pytest.approx(1 / np.sqrt(2 * 3 * 4))
    with pytest.raises(ValueError):
        lr_schedule(1.0, 0)


def test_checkpoint_roundtrip_and_corruption(tmp_path):
    arrays = {"conv/w": RNG.normal(size=(2, 1, 3, 3)).astype(np.float32),
              "fc/b": RNG.normal(size=7).astype(np.float32)}
    path = tmp_path / "ck.swbw"
    save_checkpoint(path, arrays)
    back = load_checkpoint(path)
    assert set(back) == set(arrays)
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])

    raw = bytearray(path.read_bytes())
    raw[-3] ^= 0xFF                      # flip a payload byte
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)

    bad = tmp_path / "bad.swbw"
    bad.write_bytes(b"NOTACKPT" + bytes(32))
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)


def test_check_finite():
    check_finite(np.ones(3))
    with pytest.raises(FloatingPointError):
        check_finite(np.array([1.0, np.nan]))
