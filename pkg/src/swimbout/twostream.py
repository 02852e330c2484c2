"""Two-stream convolutional classifier over appearance and motion.

One stream sees a single grayscale frame, the other a stack of quantized
optical-flow channels; each stream is an adapted CNN-M-2048 ending in a
2-way log-softmax, and the streams are fused by averaging log-probabilities
(no parameters after the per-stream outputs).
"""

from __future__ import annotations

import copy
import json
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nncore
from .augment import dequantize_flow
from .container import AugmentedSample, DatasetContainer
from .nncore import (Adam, Conv2d, Dropout, Flatten, Linear, LogSoftmax,
                     MaxPool2d, ReLU, Sequential, lr_schedule, nll_loss,
                     nll_loss_grad, save_checkpoint, load_checkpoint)


@dataclass(frozen=True)
class StreamConfig:
    """Geometry of one stream's network."""
    in_channels: int
    input_size: int
    conv_widths: tuple[int, int, int]
    fc_widths: tuple[int, int]
    conv_pads: tuple[int, int]       # padding of the first two conv layers
    preset: str

    def __post_init__(self):
        if self.in_channels < 1 or self.input_size < 1:
            raise ValueError("channels and input size must be positive")
        if len(self.conv_widths) != 3 or len(self.fc_widths) != 2:
            raise ValueError("expected 3 conv widths and 2 fc widths")


def paper_stream(in_channels: int) -> StreamConfig:
    """Full-scale preset: 224x224 input, CNN-M-2048 widths."""
    return StreamConfig(in_channels=in_channels, input_size=224,
                        conv_widths=(96, 256, 512), fc_widths=(4096, 2048),
                        conv_pads=(0, 1), preset="paper")


def desk_stream(in_channels: int) -> StreamConfig:
    """Quarter-width preset on 64x64 inputs; same layer kinds and strides."""
    return StreamConfig(in_channels=in_channels, input_size=64,
                        conv_widths=(24, 64, 128), fc_widths=(1024, 512),
                        conv_pads=(3, 2), preset="desk")


def stream_config(preset: str, in_channels: int) -> StreamConfig:
    if preset == "paper":
        return paper_stream(in_channels)
    if preset == "desk":
        return desk_stream(in_channels)
    raise ValueError(f"unknown preset {preset!r}")


def _feature_size(config: StreamConfig) -> int:
    """Spatial size after the conv/pool tower."""
    s = config.input_size
    s = (s + 2 * config.conv_pads[0] - 7) // 2 + 1   # conv1 stride 2
    s = (s - 3) // 2 + 1                             # pool1
    s = (s + 2 * config.conv_pads[1] - 5) // 2 + 1   # conv2 stride 2
    s = (s - 3) // 2 + 1                             # pool2
    s = (s - 3) // 2 + 1                             # pool5 (conv3-5 pad 1)
    if s < 1:
        raise ValueError(f"input size {config.input_size} too small "
                         f"for the conv tower")
    return s


def build_stream(config: StreamConfig) -> Sequential:
    w1, w2, w3 = config.conv_widths
    f1, f2 = config.fc_widths
    s = _feature_size(config)
    return Sequential([
        ("conv1", Conv2d(config.in_channels, w1, 7, stride=2,
                         pad=config.conv_pads[0])),
        ("relu1", ReLU()),
        ("pool1", MaxPool2d(3, 2)),
        ("conv2", Conv2d(w1, w2, 5, stride=2, pad=config.conv_pads[1])),
        ("relu2", ReLU()),
        ("pool2", MaxPool2d(3, 2)),
        ("conv3", Conv2d(w2, w3, 3, stride=1, pad=1)),
        ("relu3", ReLU()),
        ("conv4", Conv2d(w3, w3, 3, stride=1, pad=1)),
        ("relu4", ReLU()),
        ("conv5", Conv2d(w3, w3, 3, stride=1, pad=1)),
        ("relu5", ReLU()),
        ("pool5", MaxPool2d(3, 2)),
        ("flatten", Flatten()),
        ("fc6", Linear(w3 * s * s, f1)),
        ("relu6", ReLU()),
        ("drop6", Dropout(0.5)),
        ("fc7", Linear(f1, f2)),
        ("relu7", ReLU()),
        ("drop7", Dropout(0.5)),
        ("fc8", Linear(f2, 2)),
        ("logsoftmax", LogSoftmax()),
    ])


class TwoStreamModel:
    """Independent spatial and temporal streams with parameter-free fusion."""

    def __init__(self, spatial_config: StreamConfig,
                 temporal_config: StreamConfig):
        self.spatial_config = spatial_config
        self.temporal_config = temporal_config
        self.spatial = build_stream(spatial_config)
        self.temporal = build_stream(temporal_config)

    def init_he(self, rng: np.random.Generator) -> None:
        self.spatial.init_he(rng)
        self.temporal.init_he(rng)

    def forward(self, xs: np.ndarray, xt: np.ndarray, mode: str = "eval",
                rng: np.random.Generator | None = None):
        lp_s, cache_s = self.spatial.forward(xs, mode=mode, rng=rng)
        lp_t, cache_t = self.temporal.forward(xt, mode=mode, rng=rng)
        return fuse_predictions(lp_s, lp_t), (lp_s, lp_t), (cache_s, cache_t)

    def named_arrays(self) -> dict[str, np.ndarray]:
        flat = {}
        for prefix, stream in (("spatial", self.spatial),
                               ("temporal", self.temporal)):
            for k, v in stream.named_arrays().items():
                flat[f"{prefix}.{k}"] = v
        return flat

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.named_arrays().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        arrays = self.named_arrays()
        missing = set(arrays) ^ set(state)
        if missing:
            raise KeyError(f"state does not match model: {sorted(missing)}")
        for k, v in arrays.items():
            if v.shape != state[k].shape:
                raise ValueError(f"shape mismatch for {k}: "
                                 f"{v.shape} vs {state[k].shape}")
            v[...] = state[k]

    def save(self, path: Path) -> None:
        save_checkpoint(path, self.named_arrays())

    @classmethod
    def load(cls, path: Path, spatial_config: StreamConfig,
             temporal_config: StreamConfig) -> "TwoStreamModel":
        model = cls(spatial_config, temporal_config)
        model.load_state(load_checkpoint(path))
        return model


def build_model(spatial: StreamConfig, temporal: StreamConfig,
                seed: int | None = None) -> TwoStreamModel:
    model = TwoStreamModel(spatial, temporal)
    if seed is not None:
        model.init_he(np.random.default_rng(seed))
    return model


def fuse_predictions(spatial_logp: np.ndarray,
                     temporal_logp: np.ndarray) -> np.ndarray:
    """Elementwise mean of the stream log-probabilities (joint log-prob
    under independence, up to a shared constant)."""
    return (np.asarray(spatial_logp) + np.asarray(temporal_logp)) / 2.0


# ---------------------------------------------------------------------------
# pretrained-weight adaptation
# ---------------------------------------------------------------------------

def adapt_input_weights(pretrained: np.ndarray, target_channels: int,
                        rng: np.random.Generator | None = None,
                        noise_scale: float = 0.1) -> np.ndarray:
    """Rebuild a 3-channel first-layer kernel for another channel count.

    One target channel takes the RGB mean; more channels tile the sources in
    RGB order (channel k copies source k mod 3) and then add i.i.d. uniform
    noise in [-a, a] with a = noise_scale * std(pretrained).
    """
    pretrained = np.asarray(pretrained)
    if pretrained.ndim != 4 or pretrained.shape[1] != 3:
        raise ValueError(f"expected kernel (out, 3, kh, kw), "
                         f"got {pretrained.shape}")
    if target_channels < 1:
        raise ValueError("target_channels must be >= 1")
    if target_channels == 1:
        return pretrained.mean(axis=1, keepdims=True)
    tiled = pretrained[:, np.arange(target_channels) % 3]
    a = noise_scale * float(pretrained.std())
    if a > 0:
        if rng is None:
            rng = np.random.default_rng()
        tiled = tiled + rng.uniform(-a, a, size=tiled.shape)
    return tiled.astype(pretrained.dtype)


def adapt_output_weights(weights: np.ndarray, n_classes: int = 2,
                         bias: np.ndarray | None = None):
    """Average contiguous blocks of output units down to ``n_classes``.

    ``weights`` is (units, fan_in); unit count must divide evenly.  Returns
    the reduced weights, or a (weights, bias) pair when a bias is given.
    """
    weights = np.asarray(weights)
    units = weights.shape[0]
    if units % n_classes:
        raise ValueError(f"{units} units not divisible by {n_classes}")
    block = units // n_classes
    out_w = weights.reshape(n_classes, block, *weights.shape[1:]).mean(axis=1)
    if bias is None:
        return out_w
    bias = np.asarray(bias)
    if bias.shape[0] != units:
        raise ValueError("bias length must match unit count")
    return out_w, bias.reshape(n_classes, block).mean(axis=1)


# ---------------------------------------------------------------------------
# data access
# ---------------------------------------------------------------------------

def sample_inputs(sample: AugmentedSample):
    """Float inputs for both streams: frame scaled to [0, 1], flow
    dequantized to its physical displacement range."""
    xs = sample.spatial.astype(np.float32)[None] / 255.0
    xt = dequantize_flow(sample.temporal, sample.scale_meta)
    return xs, xt


def _load_batch(dataset: DatasetContainer, indices) -> tuple:
    xs, xt, ys = [], [], []
    for i in indices:
        sample = dataset[int(i)]
        s, t = sample_inputs(sample)
        xs.append(s)
        xt.append(t)
        ys.append(sample.label)
    return np.stack(xs), np.stack(xt), np.asarray(ys)


def batch_plan(event_ids: list[str], batch_size: int,
               rng: np.random.Generator) -> list[np.ndarray]:
    """Batches where every sample comes from a distinct source event.

    Samples are grouped per event and dealt round-robin: each round takes at
    most one sample per event, so chunks of a round can never collide.
    """
    groups: dict[str, list[int]] = {}
    for i, ev in enumerate(event_ids):
        groups.setdefault(ev, []).append(i)
    pools = [np.array(v) for v in groups.values()]
    for pool in pools:
        rng.shuffle(pool)
    batches = []
    depth = max(len(p) for p in pools)
    for r in range(depth):
        round_idx = np.array([p[r] for p in pools if len(p) > r])
        rng.shuffle(round_idx)
        for k in range(0, len(round_idx), batch_size):
            batches.append(round_idx[k:k + batch_size])
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


# ---------------------------------------------------------------------------
# training / evaluation / search
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-3
    epochs: int = 5
    batch_size: int = 32
    seed: int = 462019


def evaluate(model: TwoStreamModel, dataset: DatasetContainer,
             batch_size: int = 32) -> dict[str, float]:
    """Fused, spatial-only and temporal-only accuracy on a container."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty container")
    hits = np.zeros(3)
    n = len(dataset)
    for k in range(0, n, batch_size):
        xs, xt, ys = _load_batch(dataset, range(k, min(n, k + batch_size)))
        fused, (lp_s, lp_t), _ = model.forward(xs, xt, mode="eval")
        for j, lp in enumerate((fused, lp_s, lp_t)):
            hits[j] += (lp.argmax(axis=1) == ys).sum()
    return {"accuracy": hits[0] / n, "spatial_accuracy": hits[1] / n,
            "temporal_accuracy": hits[2] / n}


def train(model: TwoStreamModel, train_data: DatasetContainer,
          valid_data: DatasetContainer, config: TrainConfig,
          checkpoint_path: Path | None = None,
          history_path: Path | None = None,
          quiet: bool = False):
    """Adam training with per-epoch 1/sqrt decay and best-epoch retention.

    Returns ``(history, best_state)``: one record per epoch with train loss
    and the three validation accuracies, plus a copy of the parameters from
    the best-validation epoch (ties keep the earlier epoch).
    """
    if len(train_data) == 0 or len(valid_data) == 0:
        raise ValueError("train and validation containers must be non-empty")
    rng = np.random.default_rng(config.seed)
    event_ids = [train_data[i].provenance.event_id
                 for i in range(len(train_data))]
    optimizer = Adam(model.named_arrays(), lr=config.lr,
                     weight_decay=config.weight_decay)

    history = []
    best_state = None
    best_acc = -1.0
    for epoch in range(1, config.epochs + 1):
        lr = lr_schedule(config.lr, epoch)
        losses = []
        t0 = time.time()
        for b, batch in enumerate(batch_plan(event_ids, config.batch_size, rng)):
            xs, xt, ys = _load_batch(train_data, batch)
            fused, (lp_s, lp_t), (cache_s, cache_t) = model.forward(
                xs, xt, mode="train", rng=rng)
            loss = nll_loss(fused, ys)
            if not np.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch}, batch {b}")
            grad = nll_loss_grad(fused, ys) / 2.0   # d fused / d stream = 1/2
            _, grads_s = model.spatial.backward(cache_s, grad)
            _, grads_t = model.temporal.backward(cache_t, grad)
            flat = {}
            for prefix, grads in (("spatial", grads_s), ("temporal", grads_t)):
                for layer, pg in grads.items():
                    for k, g in pg.items():
                        if not np.all(np.isfinite(g)):
                            raise FloatingPointError(
                                f"non-finite gradient at epoch {epoch}, "
                                f"batch {b}, layer {prefix}.{layer}/{k}")
                        flat[f"{prefix}.{layer}/{k}"] = g
            optimizer.step(flat, lr=lr)
            losses.append(loss)
        record = {"epoch": epoch, "lr": lr,
                  "train_loss": float(np.mean(losses)),
                  **evaluate(model, valid_data, config.batch_size)}
        record["seconds"] = round(time.time() - t0, 3)
        history.append(record)
        if history_path is not None:
            with open(history_path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        if not quiet:
            print(json.dumps(record, sort_keys=True), flush=True)
        if record["accuracy"] > best_acc:
            best_acc = record["accuracy"]
            best_state = model.state()
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, best_state)
    return history, best_state


LR_GRID = (1e-3, 1e-4, 1e-5)
WD_GRID = (1e-2, 1e-3, 1e-4)


def hyperparameter_search(make_model, train_data: DatasetContainer,
                          valid_data: DatasetContainer,
                          lr_grid=LR_GRID, wd_grid=WD_GRID,
                          epochs: int = 8, seed: int = 462019,
                          batch_size: int = 32, quiet: bool = True):
    """Grid search ranked by best validation accuracy.

    ``make_model`` builds a freshly initialized model per combination.  Ties
    are broken toward the smaller learning rate, then smaller weight decay.
    Returns ``(best (lr, wd), result rows)``.
    """
    if not lr_grid or not wd_grid:
        raise ValueError("empty grid")
    rows = []
    for lr in lr_grid:
        for wd in wd_grid:
            model = make_model()
            cfg = TrainConfig(lr=lr, weight_decay=wd, epochs=epochs,
                              batch_size=batch_size, seed=seed)
            history, _ = train(model, train_data, valid_data, cfg, quiet=quiet)
            acc = max(h["accuracy"] for h in history)
            rows.append({"lr": lr, "weight_decay": wd,
                         "valid_accuracy": float(acc)})
    best = min(rows, key=lambda r: (-r["valid_accuracy"], r["lr"],
                                    r["weight_decay"]))
    return (best["lr"], best["weight_decay"]), rows
