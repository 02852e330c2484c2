"""Minimal deterministic neural-network engine on numpy.

Layers: 2-D convolution (cross-correlation), max-pooling, ReLU, inverted
dropout, fully connected, log-softmax.  Every layer has an exact analytic
backward pass.  Training utilities: negative log-likelihood loss, Adam with
decoupled weight decay, and a 1/sqrt(epoch) learning-rate schedule.

All tensors are plain numpy arrays; convolutional activations use the
(N, C, H, W) layout.  Layers are stateless across calls: ``forward`` returns
a cache which must be handed back to ``backward``.
"""

from __future__ import annotations

import struct
import zlib
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Input shape incompatible with a layer."""


# ---------------------------------------------------------------------------
# convolution primitives
# ---------------------------------------------------------------------------

def _out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Unfold (N, C, H, W) into (N, C*kh*kw, OH*OW) patch columns."""
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = _out_size(h, kh, stride, pad)
    ow = _out_size(w, kw, stride, pad)
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: (n, c, oh, ow, kh, kw) -> (n, c, kh, kw, oh, ow)
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3))
    return cols.reshape(n, c * kh * kw, oh * ow)


def col2im(cols: np.ndarray, x_shape: tuple, kh: int, kw: int,
           stride: int, pad: int) -> np.ndarray:
    """Fold patch columns back, accumulating overlaps (adjoint of im2col)."""
    n, c, h, w = x_shape
    oh = _out_size(h, kh, stride, pad)
    ow = _out_size(w, kw, stride, pad)
    cols6 = cols.reshape(n, c, kh, kw, oh, ow)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols6[:, :, i, j]
    if pad:
        return xp[:, :, pad:-pad, pad:-pad]
    return xp


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None,
                   stride: int, pad: int) -> np.ndarray:
    """Batched cross-correlation via im2col; w is (O, C, kh, kw)."""
    o, c, kh, kw = w.shape
    if x.shape[1] != c:
        raise ShapeError(f"conv expects {c} input channels, got {x.shape[1]}")
    cols = im2col(x, kh, kw, stride, pad)
    out = np.matmul(w.reshape(o, -1), cols)
    if b is not None:
        out += b[:, None]
    oh = _out_size(x.shape[2], kh, stride, pad)
    ow = _out_size(x.shape[3], kw, stride, pad)
    return out.reshape(x.shape[0], o, oh, ow)


def conv2d_forward_naive(x: np.ndarray, w: np.ndarray, b: np.ndarray | None,
                         stride: int, pad: int) -> np.ndarray:
    """Reference cross-correlation with explicit loops (test oracle)."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = _out_size(h, kh, stride, pad)
    ow = _out_size(wd, kw, stride, pad)
    out = np.zeros((n, o, oh, ow), dtype=x.dtype)
    for i in range(oh):
        for j in range(ow):
            patch = x[:, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
            for f in range(o):
                out[:, f, i, j] = np.einsum("nchw,chw->n", patch, w[f])
    if b is not None:
        out += b[None, :, None, None]
    return out


def conv2d_input_grad(grad_out: np.ndarray, w: np.ndarray, x_shape: tuple,
                      stride: int, pad: int) -> np.ndarray:
    """Gradient of conv2d_forward w.r.t. its input (also used by attribution)."""
    o = w.shape[0]
    n = grad_out.shape[0]
    g2 = grad_out.reshape(n, o, -1)
    dcols = np.matmul(w.reshape(o, -1).T, g2)
    return col2im(dcols, x_shape, w.shape[2], w.shape[3], stride, pad)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Layer:
    """Base layer; subclasses implement forward/backward."""

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def set_params(self, values: dict[str, np.ndarray]) -> None:
        for k, v in values.items():
            cur = self.params()[k]
            if cur.shape != v.shape:
                raise ShapeError(f"{type(self).__name__}.{k}: shape {v.shape} != {cur.shape}")
            cur[...] = v

    def forward(self, x, mode="train", rng=None):
        raise NotImplementedError

    def backward(self, cache, grad_out):
        raise NotImplementedError


class Conv2d(Layer):
    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 stride: int = 1, pad: int = 0, dtype=np.float32):
        if stride < 1:
            raise ValueError("stride must be >= 1")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.pad = pad
        self.w = np.zeros((out_channels, in_channels, kernel, kernel), dtype=dtype)
        self.b = np.zeros(out_channels, dtype=dtype)

    def init_he(self, rng: np.random.Generator) -> None:
        fan_in = self.in_channels * self.kernel * self.kernel
        self.w[...] = rng.normal(0.0, np.sqrt(2.0 / fan_in), self.w.shape)
        self.b[...] = 0.0

    def params(self):
        return {"w": self.w, "b": self.b}

    def forward(self, x, mode="train", rng=None):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(
                f"Conv2d({self.in_channels}->{self.out_channels}) got input {x.shape}")
        out = conv2d_forward(x, self.w, self.b, self.stride, self.pad)
        return out, (x.shape, im2col(x, self.kernel, self.kernel, self.stride, self.pad))

    def backward(self, cache, grad_out):
        x_shape, cols = cache
        n, o = grad_out.shape[0], self.out_channels
        g2 = grad_out.reshape(n, o, -1)
        dw = np.einsum("nol,nkl->ok", g2, cols).reshape(self.w.shape)
        db = g2.sum(axis=(0, 2))
        dx = conv2d_input_grad(grad_out, self.w, x_shape, self.stride, self.pad)
        return dx, {"w": dw, "b": db}


class MaxPool2d(Layer):
    def __init__(self, kernel: int, stride: int, pad: int = 0):
        self.kernel = kernel
        self.stride = stride
        self.pad = pad

    def forward(self, x, mode="train", rng=None):
        k, s, p = self.kernel, self.stride, self.pad
        n, c, h, w = x.shape
        xp = x
        if p:
            fill = -np.inf if np.issubdtype(x.dtype, np.floating) else np.iinfo(x.dtype).min
            xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=fill)
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        oh, ow = win.shape[2], win.shape[3]
        flat = win.reshape(n, c, oh, ow, k * k)
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        return out, (x.shape, arg)

    def backward(self, cache, grad_out):
        x_shape, arg = cache
        k, s, p = self.kernel, self.stride, self.pad
        n, c, h, w = x_shape
        oh, ow = arg.shape[2], arg.shape[3]
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=grad_out.dtype)
        ni, ci, oi, oj = np.indices(arg.shape)
        ri = oi * s + arg // k
        cj = oj * s + arg % k
        np.add.at(dxp, (ni, ci, ri, cj), grad_out)
        dx = dxp[:, :, p:p + h, p:p + w] if p else dxp
        return dx, {}

    def route_relevance(self, cache, rel_out):
        """Winner-takes-all relevance routing (same scatter as backward)."""
        dx, _ = self.backward(cache, rel_out)
        return dx


class ReLU(Layer):
    def forward(self, x, mode="train", rng=None):
        return np.maximum(x, 0), (x > 0)

    def backward(self, cache, grad_out):
        return grad_out * cache, {}


class Dropout(Layer):
    def __init__(self, rate: float):
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")
        self.rate = rate

    def forward(self, x, mode="train", rng=None):
        if mode != "train" or self.rate == 0.0:
            return x, None
        if rng is None:
            raise ValueError("Dropout in train mode needs an rng")
        keep = (rng.random(x.shape) >= self.rate)
        scale = 1.0 / (1.0 - self.rate)
        return x * keep * scale, (keep, scale)

    def backward(self, cache, grad_out):
        if cache is None:
            return grad_out, {}
        keep, scale = cache
        return grad_out * keep * scale, {}


class Flatten(Layer):
    def forward(self, x, mode="train", rng=None):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, cache, grad_out):
        return grad_out.reshape(cache), {}


class Linear(Layer):
    def __init__(self, in_features: int, out_features: int, dtype=np.float32):
        self.in_features = in_features
        self.out_features = out_features
        self.w = np.zeros((out_features, in_features), dtype=dtype)
        self.b = np.zeros(out_features, dtype=dtype)

    def init_he(self, rng: np.random.Generator) -> None:
        self.w[...] = rng.normal(0.0, np.sqrt(2.0 / self.in_features), self.w.shape)
        self.b[...] = 0.0

    def params(self):
        return {"w": self.w, "b": self.b}

    def forward(self, x, mode="train", rng=None):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(
                f"Linear({self.in_features}->{self.out_features}) got input {x.shape}")
        return x @ self.w.T + self.b, x

    def backward(self, cache, grad_out):
        x = cache
        dw = grad_out.T @ x
        db = grad_out.sum(axis=0)
        dx = grad_out @ self.w
        return dx, {"w": dw, "b": db}


class LogSoftmax(Layer):
    def forward(self, x, mode="train", rng=None):
        shifted = x - x.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        out = shifted - lse
        return out, out

    def backward(self, cache, grad_out):
        softmax = np.exp(cache)
        dx = grad_out - softmax * grad_out.sum(axis=1, keepdims=True)
        return dx, {}


class Sequential:
    """Ordered stack of named layers with exact backprop."""

    def __init__(self, layers: list[tuple[str, Layer]]):
        names = [n for n, _ in layers]
        if len(set(names)) != len(names):
            raise ValueError("duplicate layer names")
        self.layers = layers

    def __iter__(self):
        return iter(self.layers)

    def forward(self, x, mode="train", rng=None):
        caches = []
        for name, layer in self.layers:
            x, cache = layer.forward(x, mode=mode, rng=rng)
            caches.append(cache)
        return x, caches

    def backward(self, caches, grad_out):
        grads: dict[str, dict[str, np.ndarray]] = {}
        for (name, layer), cache in zip(reversed(self.layers), reversed(caches)):
            grad_out, pg = layer.backward(cache, grad_out)
            if pg:
                grads[name] = pg
        return grad_out, grads

    def params(self) -> dict[str, dict[str, np.ndarray]]:
        return {name: layer.params() for name, layer in self.layers if layer.params()}

    def named_arrays(self) -> dict[str, np.ndarray]:
        flat = {}
        for name, p in self.params().items():
            for k, v in p.items():
                flat[f"{name}/{k}"] = v
        return flat

    def init_he(self, rng: np.random.Generator) -> None:
        for _, layer in self.layers:
            if hasattr(layer, "init_he"):
                layer.init_he(rng)


# ---------------------------------------------------------------------------
# loss, optimizer, schedule
# ---------------------------------------------------------------------------

def nll_loss(log_probs: np.ndarray, labels) -> float:
    """Mean negative log-likelihood of (N, K) log-probabilities."""
    log_probs = np.atleast_2d(log_probs)
    labels = np.atleast_1d(labels)
    if labels.min() < 0 or labels.max() >= log_probs.shape[1]:
        raise IndexError(f"label out of range for {log_probs.shape[1]} classes")
    return float(-log_probs[np.arange(len(labels)), labels].mean())


def nll_loss_grad(log_probs: np.ndarray, labels) -> np.ndarray:
    """Gradient of nll_loss w.r.t. the log-probabilities."""
    log_probs = np.atleast_2d(log_probs)
    labels = np.atleast_1d(labels)
    g = np.zeros_like(log_probs)
    g[np.arange(len(labels)), labels] = -1.0 / len(labels)
    return g


class Adam:
    """Adam with bias correction and decoupled weight decay.

    Decay is multiplicative on the parameter (param -= lr * wd * param) and
    never enters the moment estimates.
    """

    def __init__(self, arrays: dict[str, np.ndarray], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0, decay_filter=None):
        self.arrays = arrays
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        # biases are conventionally exempt from decay
        self.decay_filter = decay_filter or (lambda name: not name.endswith("/b"))
        self.m = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.step_count = 0

    def step(self, grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.arrays.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            mhat = m / bc1
            vhat = v / bc2
            p -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype, copy=False)
            if self.weight_decay and self.decay_filter(name):
                p -= (lr * self.weight_decay) * p


def lr_schedule(base_lr: float, epoch: int) -> float:
    """Learning rate for a 1-based epoch: multiplied by 1/sqrt(k+1) after epoch k."""
    if epoch < 1:
        raise ValueError("epoch must be >= 1")
    factor = 1.0
    for k in range(2, epoch + 1):
        factor /= np.sqrt(k)
    return base_lr * factor


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"SWBW1\x00"


class CheckpointError(IOError):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    """Chunked binary checkpoint: per-array (name, shape, float32 data, CRC32)."""
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            data = np.ascontiguousarray(arr, dtype=np.float32).tobytes()
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(struct.pack("<QI", len(data), zlib.crc32(data)))
            f.write(data)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        if f.read(len(_CKPT_MAGIC)) != _CKPT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (count,) = struct.unpack("<I", f.read(4))
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode()
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            size, crc = struct.unpack("<QI", f.read(12))
            data = f.read(size)
            if zlib.crc32(data) != crc:
                raise CheckpointError(f"{path}: CRC mismatch in array '{name}'")
            out[name] = np.frombuffer(data, dtype=np.float32).reshape(shape).copy()
        return out


def check_finite(x: np.ndarray, context: str = "") -> None:
    if not np.isfinite(x).all():
        raise FloatingPointError(f"non-finite values {('in ' + context) if context else ''}")
