"""Augmentation pipeline: frame subsampling, optical flow, flips and crops.

Each 150-frame bout event expands into ``n_subsamples x len(flips) x
len(crops)`` samples (144 with the full preset).  Flow is computed once per
subsample on the uncropped frames; flips and crops are applied afterwards to
both the chosen spatial frame and the flow stack, and each flow channel is
quantized to 8 bits with per-channel (min, max) metadata for exact inversion.
"""

from __future__ import annotations

import io
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .container import AugmentedSample, ContainerWriter, DatasetContainer, Provenance
from .optflow import (DESK_FLOW_PARAMS, PAPER_FLOW_PARAMS, FlowParams,
                      FlowPyramid)
from .preprocess import BoutEvent

FULL_CROP_OFFSETS = ((8, 8), (8, 16), (8, 24), (16, 8), (16, 16), (16, 24),
                     (24, 8), (24, 16), (24, 24))


@dataclass(frozen=True)
class AugmentConfig:
    """Knobs for the expansion of one event into augmented samples."""
    n_subsamples: int = 8
    keep_frames: int = 86
    max_gap: int = 2
    even_spacing: bool = False       # deterministic evenly spaced frames instead
    crop_size: int = 224
    crop_offsets: tuple = FULL_CROP_OFFSETS
    flips: tuple = (False, True)
    downscale: int = 1               # integer block-mean factor applied first
    flow_params: FlowParams = PAPER_FLOW_PARAMS
    codec: str = "none"              # "none" or "jpeg40"

    def __post_init__(self):
        if self.codec not in ("none", "jpeg40"):
            raise ValueError(f"unknown codec {self.codec!r}")
        if self.downscale < 1:
            raise ValueError("downscale must be >= 1")

    @property
    def samples_per_event(self) -> int:
        return self.n_subsamples * len(self.flips) * len(self.crop_offsets)

    @property
    def temporal_channels(self) -> int:
        return 2 * (self.keep_frames - 1)


FULL_AUGMENT = AugmentConfig()

# A small-geometry preset that keeps every stage of the pipeline but fits a
# CPU budget: events are block-averaged to 64x64, 17 evenly spaced frames
# give 32 flow channels, and only the flip axis is varied.
DESK_AUGMENT = AugmentConfig(
    n_subsamples=1, keep_frames=17, max_gap=0, even_spacing=True,
    crop_size=64, crop_offsets=((0, 0),), flips=(False, True),
    downscale=4, flow_params=DESK_FLOW_PARAMS)


def _randint_below(rng: np.random.Generator, bound: int) -> int:
    """Uniform arbitrary-precision integer in [0, bound)."""
    bits = bound.bit_length()
    while True:
        u = 0
        for _ in range(0, bits, 63):
            u = (u << 63) | int(rng.integers(0, 1 << 63))
        u >>= 63 * ((bits + 62) // 63) - bits
        if u < bound:
            return u


def subsample_indices(n: int = 150, k: int = 86, max_gap: int = 2,
                      rng: np.random.Generator | None = None) -> np.ndarray:
    """Uniformly random strictly increasing k-subset of range(n) where at
    most ``max_gap`` consecutive frames are omitted anywhere, including
    before the first and after the last kept frame.

    A valid subset is equivalent to a composition of the n - k dropped
    frames into k + 1 gap slots with every part <= max_gap, so sampling a
    composition uniformly (slot by slot, weighted by exact completion
    counts) gives exact uniformity over the valid sets.
    """
    if k > n:
        raise ValueError(f"cannot keep {k} of {n} frames")
    if k + max_gap * (k + 1) < n:
        raise ValueError(f"no valid selection exists for (n={n}, k={k}, "
                         f"max_gap={max_gap})")
    if k == n:
        return np.arange(n)
    if rng is None:
        rng = np.random.default_rng()

    drops = n - k
    # counts[s][r]: compositions of r drops into s slots with parts <= max_gap
    counts = [[0] * (drops + 1) for _ in range(k + 2)]
    counts[0][0] = 1
    for s in range(1, k + 2):
        for r in range(drops + 1):
            counts[s][r] = sum(counts[s - 1][r - g]
                               for g in range(min(max_gap, r) + 1))

    gaps = []
    remaining = drops
    for s in range(k + 1, 0, -1):
        weights = [counts[s - 1][remaining - g]
                   for g in range(min(max_gap, remaining) + 1)]
        total = sum(weights)
        u = _randint_below(rng, total)
        g = 0
        while u >= weights[g]:
            u -= weights[g]
            g += 1
        gaps.append(g)
        remaining -= g

    indices = np.empty(k, dtype=np.int64)
    pos = gaps[0]
    for i in range(k):
        indices[i] = pos
        if i + 1 < k:
            pos += gaps[i + 1] + 1
    return indices


def valid_subsample(indices: np.ndarray, n: int, max_gap: int) -> bool:
    """Gap predicate shared by the sampler and its tests."""
    idx = np.asarray(indices)
    if idx[0] > max_gap or idx[-1] < n - 1 - max_gap:
        return False
    return bool(np.all(np.diff(idx) <= max_gap + 1))


def even_indices(n: int, k: int) -> np.ndarray:
    """Deterministic evenly spaced k-subset of range(n)."""
    return np.round(np.linspace(0, n - 1, k)).astype(np.int64)


def block_downscale(frames: np.ndarray, factor: int) -> np.ndarray:
    """Block-mean downscale of (T, H, W) or (H, W) uint8 frames."""
    if factor == 1:
        return frames
    squeeze = frames.ndim == 2
    if squeeze:
        frames = frames[None]
    t, h, w = frames.shape
    if h % factor or w % factor:
        raise ValueError(f"frame size {(h, w)} not divisible by {factor}")
    out = frames.reshape(t, h // factor, factor, w // factor, factor) \
                .mean(axis=(2, 4))
    out = np.round(out).astype(np.uint8)
    return out[0] if squeeze else out


def _jpeg40_roundtrip(plane: np.ndarray) -> np.ndarray:
    buf = io.BytesIO()
    Image.fromarray(plane).save(buf, format="JPEG", quality=40)
    buf.seek(0)
    return np.asarray(Image.open(buf))


def quantize_flow(dx: np.ndarray, dy: np.ndarray, codec: str = "none"):
    """Map each flow channel affinely from [min, max] to 0..255 uint8.

    Returns ``(planes, scale_meta)`` where planes is (2, H, W) uint8 in
    (x, y) order and scale_meta is (2, 2) float32 rows of (min, max).
    A constant channel gets scale (v, v) and an all-zero plane.
    """
    planes = np.empty((2,) + dx.shape, dtype=np.uint8)
    meta = np.empty((2, 2), dtype=np.float32)
    for c, chan in enumerate((dx, dy)):
        if not np.all(np.isfinite(chan)):
            raise FloatingPointError("non-finite flow values")
        lo, hi = float(chan.min()), float(chan.max())
        meta[c] = (lo, hi)
        if hi > lo:
            plane = np.round((chan - lo) * (255.0 / (hi - lo))).astype(np.uint8)
        else:
            plane = np.zeros(chan.shape, dtype=np.uint8)
        if codec == "jpeg40" and hi > lo:
            plane = _jpeg40_roundtrip(plane)
        planes[c] = plane
    return planes, meta


def dequantize_flow(planes: np.ndarray, scale_meta: np.ndarray) -> np.ndarray:
    """Invert :func:`quantize_flow`; returns float32 channels."""
    planes = np.asarray(planes, dtype=np.float32)
    lo = np.asarray(scale_meta, dtype=np.float32)[:, 0][:, None, None]
    hi = np.asarray(scale_meta, dtype=np.float32)[:, 1][:, None, None]
    return lo + planes * (hi - lo) / 255.0


def expand_subsample(event: BoutEvent, indices: np.ndarray,
                     rng: np.random.Generator,
                     config: AugmentConfig = FULL_AUGMENT,
                     subsample_id: int = 0,
                     pyramid: FlowPyramid | None = None) -> list[AugmentedSample]:
    """All flip x crop variants of one subsampled event.

    One kept frame, chosen uniformly, becomes the spatial input; the flow
    stack over consecutive kept frames becomes the temporal input.  A
    vertical flip reverses rows everywhere and additionally negates the
    y-flow, since reflecting an image negates vertical displacements.

    ``pyramid`` optionally supplies pre-built multi-scale expansions of the
    full (downscaled) event so that frame pairs shared between subsamples
    are solved only once.
    """
    indices = np.asarray(indices)
    frames = block_downscale(event.frames, config.downscale)
    kept = frames[indices]
    spatial_pick = int(rng.integers(len(kept)))
    if pyramid is None:
        pyramid = FlowPyramid(frames.astype(np.float32), config.flow_params)
    fields = [pyramid.flow(int(indices[k]), int(indices[k + 1]))
              for k in range(len(indices) - 1)]

    samples = []
    for flip in config.flips:
        spatial = kept[spatial_pick]
        stacks = []
        for f in fields:
            dx, dy = f.dx, f.dy
            if flip:
                dx, dy = dx[::-1], -dy[::-1]
            stacks.extend((dx, dy))
        if flip:
            spatial = spatial[::-1]
        for crop_id, (r0, c0) in enumerate(config.crop_offsets):
            sl = (slice(r0, r0 + config.crop_size),
                  slice(c0, c0 + config.crop_size))
            planes = np.empty((len(stacks),) + (config.crop_size,) * 2,
                              dtype=np.uint8)
            meta = np.empty((len(stacks), 2), dtype=np.float32)
            for k in range(0, len(stacks), 2):
                try:
                    p, m = quantize_flow(stacks[k][sl], stacks[k + 1][sl],
                                         codec=config.codec)
                except FloatingPointError as exc:
                    raise FloatingPointError(
                        f"{exc} (event {event.source_id}, subsample "
                        f"{subsample_id}, flip {flip}, crop {crop_id})") from exc
                planes[k:k + 2] = p
                meta[k:k + 2] = m
            samples.append(AugmentedSample(
                spatial=spatial[sl].copy(), temporal=planes,
                label=event.label,
                provenance=Provenance(event_id=_event_id(event),
                                      subsample_id=subsample_id,
                                      flip=bool(flip), crop_id=crop_id),
                scale_meta=meta))
    return samples


def _event_id(event: BoutEvent) -> str:
    return f"{event.source_id}_e{event.start_index:05d}"


def augment_event(event: BoutEvent, rng: np.random.Generator,
                  config: AugmentConfig = FULL_AUGMENT) -> list[AugmentedSample]:
    n = len(event.frames)
    pyramid = FlowPyramid(
        block_downscale(event.frames, config.downscale).astype(np.float32),
        config.flow_params)
    samples = []
    for s in range(config.n_subsamples):
        if config.even_spacing:
            idx = even_indices(n, config.keep_frames)
        else:
            idx = subsample_indices(n, config.keep_frames, config.max_gap, rng)
        samples.extend(expand_subsample(event, idx, rng, config,
                                        subsample_id=s, pyramid=pyramid))
    return samples


def split_events(events: list[BoutEvent], split_spec: tuple[int, int, int],
                 seed: int = 0) -> dict[str, list[BoutEvent]]:
    """Assign events to train/valid/test at source-video granularity.

    ``split_spec`` gives the relative weights (e.g. ``(28, 4, 6)``); all
    events from one source video land in the same split so that no source
    leaks across splits.
    """
    sources = sorted({e.source_id for e in events})
    rng = np.random.default_rng(seed)
    rng.shuffle(sources)
    weights = np.asarray(split_spec, dtype=np.float64)
    if weights.sum() <= 0:
        raise ValueError("split weights must be positive")
    bounds = np.floor(np.cumsum(weights) / weights.sum() * len(sources) + 0.5)
    names = ("train", "valid", "test")
    assign = {}
    prev = 0
    for name, b in zip(names, bounds.astype(int)):
        for s in sources[prev:b]:
            assign[s] = name
        prev = b
    out = {name: [] for name in names}
    for e in events:
        out[assign[e.source_id]].append(e)
    return out


def _worker(args):
    event, seed, config = args
    return augment_event(event, np.random.default_rng(seed), config)


def n_workers() -> int:
    value = os.environ.get("SWIMBOUT_WORKERS", "1")
    try:
        return max(1, int(value))
    except ValueError:
        warnings.warn(f"ignoring invalid SWIMBOUT_WORKERS={value!r}")
        return 1


def augment_split(events: list[BoutEvent], split: str, path: Path,
                  config: AugmentConfig = FULL_AUGMENT,
                  seed: int = 0) -> DatasetContainer:
    """Expand ``events`` and stream the samples into one container file.

    Event-level parallelism with a single writer: workers own whole events,
    results are written in event order so output is independent of worker
    count.
    """
    seeds = np.random.SeedSequence(seed).generate_state(max(1, len(events)))
    jobs = [(e, int(s), config) for e, s in zip(events, seeds)]
    workers = n_workers()
    with ContainerWriter(path, split) as writer:
        if workers == 1 or len(jobs) < 2:
            for job in jobs:
                for sample in _worker(job):
                    writer.append(sample)
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                for batch in pool.map(_worker, jobs):
                    for sample in batch:
                        writer.append(sample)
    return DatasetContainer(path)
