"""Attribution over a trained stream: Deep Taylor relevance, gradient
saliency, and guided backpropagation.

All three methods cost one forward and one (modified) backward pass.  Deep
Taylor Decomposition distributes the target-class logit backwards: the z+
rule for hidden linear/conv layers (positive weights against post-ReLU
activations), winner-takes-all routing through max-pooling, and the z^B box
rule at the input layer, whose bounds come from the input's value range.
Biases are excluded from the propagation denominators, so conservation is
exact on bias-free layers and approximate otherwise.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .augment import dequantize_flow
from .container import AugmentedSample, ContainerError
from .nncore import (Conv2d, Dropout, Flatten, Linear, LogSoftmax, MaxPool2d,
                     ReLU, Sequential, conv2d_forward, conv2d_input_grad)


@dataclass
class RelevanceMap:
    values: np.ndarray           # shaped like the stream input (C, H, W)
    decomposed_output: float     # the logit whose relevance was distributed
    method: str                  # dtd | saliency | guided
    target_class: int
    label: int = -1              # ground truth when known
    stream: str = ""

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise FloatingPointError("non-finite relevance values")


def _forward_trace(stream: Sequential, x: np.ndarray):
    """Eval-mode forward pass recording every layer's input and cache."""
    trace = []
    out = x
    for name, layer in stream:
        y, cache = layer.forward(out, mode="eval")
        trace.append((name, layer, out, cache))
        out = y
    return out, trace


def _logits(trace, output):
    """Pre-softmax scores: the input of a trailing LogSoftmax, if present."""
    if trace and isinstance(trace[-1][1], LogSoftmax):
        return trace[-1][2], trace[:-1]
    return output, trace


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    """num / den with exact zeros where the denominator is exactly 0."""
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den != 0)
    return out


def _zplus_linear(layer: Linear, x: np.ndarray, rel: np.ndarray) -> np.ndarray:
    wp = np.maximum(layer.w.astype(np.float64), 0.0)
    z = x @ wp.T
    s = _safe_div(rel, z)
    return x * (s @ wp)


def _zplus_conv(layer: Conv2d, x: np.ndarray, rel: np.ndarray) -> np.ndarray:
    wp = np.maximum(layer.w.astype(np.float64), 0.0)
    z = conv2d_forward(x, wp, None, layer.stride, layer.pad)
    s = _safe_div(rel, z)
    return x * conv2d_input_grad(s, wp, x.shape, layer.stride, layer.pad)


def _zb_input(layer, x: np.ndarray, rel: np.ndarray,
              lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """z^B rule: relevance through the first layer with box constraints."""
    w = layer.w.astype(np.float64)
    wp = np.maximum(w, 0.0)
    wm = np.minimum(w, 0.0)
    if isinstance(layer, Conv2d):
        z = (conv2d_forward(x, w, None, layer.stride, layer.pad)
             - conv2d_forward(lo, wp, None, layer.stride, layer.pad)
             - conv2d_forward(hi, wm, None, layer.stride, layer.pad))
        s = _safe_div(rel, z)
        grad = lambda ww: conv2d_input_grad(s, ww, x.shape, layer.stride, layer.pad)
    elif isinstance(layer, Linear):
        z = x @ w.T - lo @ wp.T - hi @ wm.T
        s = _safe_div(rel, z)
        grad = lambda ww: s @ ww
    else:
        raise TypeError(f"z^B rule needs a parametric layer, got {type(layer)}")
    return x * grad(w) - lo * grad(wp) - hi * grad(wm)


def _broadcast_bounds(bounds, x: np.ndarray) -> np.ndarray:
    b = np.asarray(bounds, dtype=np.float64)
    if b.ndim == 0:
        return np.full_like(x, float(b))
    if b.ndim == 1 and x.ndim == 4 and b.shape[0] == x.shape[1]:
        return np.broadcast_to(b[None, :, None, None], x.shape).astype(np.float64)
    return np.broadcast_to(b, x.shape).astype(np.float64)


def dtd_relevance(stream: Sequential, x: np.ndarray,
                  target_class: int | None = None,
                  input_bounds: tuple = (0.0, 1.0),
                  stream_name: str = "", label: int = -1,
                  input_rule: str = "zb") -> RelevanceMap:
    """Deep Taylor Decomposition of one sample's target-class logit.

    ``x`` is a single input with or without the leading batch axis;
    ``input_bounds`` gives (low, high) for the z^B rule, scalar or
    per-channel.  ``input_rule`` selects the first-layer rule: "zb" (box
    constraints, the default for real-valued inputs) or "zplus" (useful
    when the input is itself nonnegative activation-like data).
    """
    if input_rule not in ("zb", "zplus"):
        raise ValueError(f"unknown input rule {input_rule!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    output, trace = _forward_trace(stream, x)
    logits, trace = _logits(trace, output)
    if target_class is None:
        target_class = int(logits[0].argmax())
    seed = float(logits[0, target_class])
    rel = np.zeros_like(logits, dtype=np.float64)
    rel[0, target_class] = seed

    first_parametric = next(i for i, t in enumerate(trace)
                            if isinstance(t[1], (Conv2d, Linear)))
    for i in range(len(trace) - 1, -1, -1):
        name, layer, x_in, cache = trace[i]
        x_in = x_in.astype(np.float64)
        if isinstance(layer, (Conv2d, Linear)):
            if i == first_parametric and input_rule == "zb":
                lo = _broadcast_bounds(input_bounds[0], x_in)
                hi = _broadcast_bounds(input_bounds[1], x_in)
                rel = _zb_input(layer, x_in, rel, lo, hi)
            elif isinstance(layer, Conv2d):
                rel = _zplus_conv(layer, x_in, rel)
            else:
                rel = _zplus_linear(layer, x_in, rel)
        elif isinstance(layer, MaxPool2d):
            rel = layer.route_relevance(cache, rel)
        elif isinstance(layer, Flatten):
            rel = rel.reshape(x_in.shape)
        elif isinstance(layer, (ReLU, Dropout)):
            pass                       # relevance passes through unchanged
        else:
            raise TypeError(f"no relevance rule for layer {name!r} "
                            f"({type(layer).__name__})")
    return RelevanceMap(values=rel[0], decomposed_output=seed, method="dtd",
                        target_class=target_class, label=label,
                        stream=stream_name)


def _gradient(stream: Sequential, x: np.ndarray, target_class: int | None,
              guided: bool):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    output, trace = _forward_trace(stream, x)
    logits, trace = _logits(trace, output)
    if target_class is None:
        target_class = int(logits[0].argmax())
    grad = np.zeros_like(logits, dtype=np.float64)
    grad[0, target_class] = 1.0
    for name, layer, x_in, cache in reversed(trace):
        if guided and isinstance(layer, ReLU):
            grad = grad * cache * (grad > 0)
        else:
            grad, _ = layer.backward(cache, grad)
    return grad[0], float(logits[0, target_class]), target_class


def saliency(stream: Sequential, x: np.ndarray,
             target_class: int | None = None,
             stream_name: str = "", label: int = -1) -> RelevanceMap:
    """|d logit / d input| per element."""
    grad, score, target = _gradient(stream, x, target_class, guided=False)
    return RelevanceMap(values=np.abs(grad), decomposed_output=score,
                        method="saliency", target_class=target, label=label,
                        stream=stream_name)


def guided_backprop(stream: Sequential, x: np.ndarray,
                    target_class: int | None = None,
                    stream_name: str = "", label: int = -1) -> RelevanceMap:
    """Backward pass where ReLUs pass gradient only when both the forward
    input and the incoming gradient are positive."""
    grad, score, target = _gradient(stream, x, target_class, guided=True)
    return RelevanceMap(values=grad, decomposed_output=score,
                        method="guided", target_class=target, label=label,
                        stream=stream_name)


def explain_sample(model, sample: AugmentedSample, stream: str = "temporal",
                   method: str = "dtd",
                   target_class: int | None = None) -> RelevanceMap:
    """Attribution for one augmented sample, picking stream input and box
    bounds from the sample itself."""
    from .twostream import sample_inputs   # local import avoids a cycle
    xs, xt = sample_inputs(sample)
    if stream == "spatial":
        net, x, bounds = model.spatial, xs, (0.0, 1.0)
    elif stream == "temporal":
        lo = np.minimum(sample.scale_meta[:, 0], 0.0)
        hi = np.maximum(sample.scale_meta[:, 1], 0.0)
        net, x, bounds = model.temporal, xt, (lo, hi)
    else:
        raise ValueError(f"unknown stream {stream!r}")
    if method == "dtd":
        return dtd_relevance(net, x, target_class, input_bounds=bounds,
                             stream_name=stream, label=sample.label)
    if method == "saliency":
        return saliency(net, x, target_class, stream_name=stream,
                        label=sample.label)
    if method == "guided":
        return guided_backprop(net, x, target_class, stream_name=stream,
                               label=sample.label)
    raise ValueError(f"unknown method {method!r}")


# ---------------------------------------------------------------------------
# relevance-map container (same chunk discipline as the dataset container)
# ---------------------------------------------------------------------------

MAP_MAGIC = b"RMAP1\x00"


def write_maps(maps: list[RelevanceMap], path: Path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAP_MAGIC)
        fh.write(struct.pack("<Q", len(maps)))
        offsets = []
        for m in maps:
            offsets.append(fh.tell())
            meta = json.dumps({
                "shape": list(m.values.shape),
                "decomposed_output": m.decomposed_output,
                "method": m.method, "target_class": m.target_class,
                "label": m.label, "stream": m.stream}, sort_keys=True).encode()
            payload = zlib.compress(
                np.ascontiguousarray(m.values, dtype=np.float32).tobytes(), 6)
            fh.write(struct.pack("<I", len(meta)) + meta)
            fh.write(struct.pack("<I", len(payload)) + payload)
            fh.write(struct.pack("<I", zlib.crc32(meta + payload)))
        index_offset = fh.tell()
        index = struct.pack(f"<{len(offsets)}Q", *offsets)
        fh.write(index + struct.pack("<I", zlib.crc32(index)))
        fh.write(struct.pack("<Q", index_offset))


def read_maps(path: Path) -> list[RelevanceMap]:
    maps = []
    with open(path, "rb") as fh:
        if fh.read(len(MAP_MAGIC)) != MAP_MAGIC:
            raise ContainerError(f"{path}: not a relevance-map container")
        (count,) = struct.unpack("<Q", fh.read(8))
        for i in range(count):
            (meta_len,) = struct.unpack("<I", fh.read(4))
            meta = fh.read(meta_len)
            (payload_len,) = struct.unpack("<I", fh.read(4))
            payload = fh.read(payload_len)
            (crc,) = struct.unpack("<I", fh.read(4))
            if zlib.crc32(meta + payload) != crc:
                raise ContainerError(f"{path}: checksum failure in chunk {i}")
            info = json.loads(meta)
            values = np.frombuffer(zlib.decompress(payload), dtype=np.float32) \
                       .reshape(info["shape"]).copy()
            maps.append(RelevanceMap(
                values=values, decomposed_output=info["decomposed_output"],
                method=info["method"], target_class=info["target_class"],
                label=info["label"], stream=info["stream"]))
    return maps
