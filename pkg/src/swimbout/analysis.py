"""Aggregation and diagnostics over relevance maps.

Class-averaged heatmaps, the per-flow-frame relevance distribution, windowed
averages along the classifier-confidence axis, a corner-mass statistic that
flags shortcut learning in the maskable corner regions, and red-overlay
rendering of maps onto grayscale frames.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .explain import RelevanceMap

CONFIDENCE_WINDOW = 104
CONFIDENCE_EPS = 1e-12
CORNER_FRACTION = 85.0 / 256.0   # corner square side relative to map size


@dataclass
class HeatmapAggregate:
    mean_map: np.ndarray         # 2-D: channel-summed, sample-averaged
    group: str                   # e.g. "class0", "window3", "all"
    count: int

    def __post_init__(self):
        if self.count <= 0:
            raise ValueError("aggregate needs at least one sample")


def channel_sum(m: RelevanceMap) -> np.ndarray:
    values = np.asarray(m.values)
    if values.ndim == 2:
        return values.astype(np.float64)
    return values.sum(axis=0, dtype=np.float64)


def aggregate_heatmaps(maps: list[RelevanceMap],
                       group_by: str = "class") -> list[HeatmapAggregate]:
    """Mean channel-summed heatmap per group.

    ``group_by`` is "class" (ground-truth label), "prediction"
    (target class of the map) or "all".
    """
    if group_by not in ("class", "prediction", "all"):
        raise ValueError(f"unknown grouping {group_by!r}")
    groups: dict[str, list[np.ndarray]] = {}
    for m in maps:
        if group_by == "class":
            key = f"class{m.label}"
        elif group_by == "prediction":
            key = f"class{m.target_class}"
        else:
            key = "all"
        groups.setdefault(key, []).append(channel_sum(m))
    out = []
    for key in sorted(groups):
        stack = groups[key]
        if not stack:
            warnings.warn(f"empty group {key!r} omitted")
            continue
        out.append(HeatmapAggregate(mean_map=np.mean(stack, axis=0),
                                    group=key, count=len(stack)))
    return out


def frame_relevance_distribution(m: RelevanceMap) -> np.ndarray:
    """Total relevance per flow frame: entry k sums channels 2k and 2k+1."""
    values = np.asarray(m.values)
    if values.ndim != 3 or values.shape[0] % 2:
        raise ValueError("expected a temporal map with an even channel count, "
                         f"got shape {values.shape}")
    per_channel = values.sum(axis=(1, 2), dtype=np.float64)
    return per_channel.reshape(-1, 2).sum(axis=1)


def confidence(p0: np.ndarray, p1: np.ndarray) -> np.ndarray:
    """c = -log(log P(1) / log P(0)), natural logs; larger = more confident
    that the sample is class 0."""
    p0 = np.clip(np.asarray(p0, dtype=np.float64),
                 CONFIDENCE_EPS, 1 - CONFIDENCE_EPS)
    p1 = np.clip(np.asarray(p1, dtype=np.float64),
                 CONFIDENCE_EPS, 1 - CONFIDENCE_EPS)
    return -np.log(np.log(p1) / np.log(p0))


def confidence_windows(maps: list[RelevanceMap], log_probs: np.ndarray,
                       window: int = CONFIDENCE_WINDOW,
                       negative_class: int = 0) -> list[HeatmapAggregate]:
    """Windows of negative classifications ordered by confidence.

    ``log_probs`` holds the fused log-probabilities (N, 2) aligned with
    ``maps``.  Samples predicted negative are sorted by ascending confidence
    and averaged in consecutive windows; a smaller leftover window is kept
    and flagged in its group name.
    """
    log_probs = np.asarray(log_probs, dtype=np.float64)
    if len(log_probs) != len(maps):
        raise ValueError("maps and log_probs must align")
    probs = np.exp(log_probs - np.logaddexp(log_probs[:, 0], log_probs[:, 1])[:, None])
    negatives = [i for i in range(len(maps))
                 if log_probs[i].argmax() == negative_class]
    c = confidence(probs[negatives, 0], probs[negatives, 1])
    order = [negatives[i] for i in np.argsort(c, kind="stable")]
    out = []
    for w, k in enumerate(range(0, len(order), window)):
        chunk = order[k:k + window]
        tag = f"window{w}" if len(chunk) == window else f"window{w}_partial"
        out.append(HeatmapAggregate(
            mean_map=np.mean([channel_sum(maps[i]) for i in chunk], axis=0),
            group=tag, count=len(chunk)))
    return out


def corner_regions(shape: tuple[int, int]) -> list[tuple[slice, slice]]:
    """Top-left and bottom-left squares, scaled from the 85/256 reference."""
    h, w = shape
    side_r = int(round(CORNER_FRACTION * h))
    side_c = int(round(CORNER_FRACTION * w))
    return [(slice(0, side_r), slice(0, side_c)),
            (slice(h - side_r, h), slice(0, side_c))]


def corner_mass(heatmap: np.ndarray) -> float:
    """Fraction of total absolute relevance inside the corner regions."""
    heatmap = np.abs(np.asarray(heatmap, dtype=np.float64))
    total = heatmap.sum()
    if total == 0:
        return 0.0
    return float(sum(heatmap[r].sum() for r in corner_regions(heatmap.shape))
                 / total)


def render_overlay(base: np.ndarray, heatmap: np.ndarray, out_path: Path,
                   percentile: float = 99.0) -> Path:
    """Grayscale base with the map overlaid in red.

    The map is normalized by its ``percentile`` value (robust to single-pixel
    outliers), clamped to [0, 1], and added onto the red channel.
    """
    base = np.asarray(base, dtype=np.float64)
    heatmap = np.asarray(heatmap, dtype=np.float64)
    if base.shape != heatmap.shape:
        raise ValueError(f"shape mismatch {base.shape} vs {heatmap.shape}")
    if base.max() > 0:
        gray = base / base.max() * 255.0
    else:
        gray = base
    pos = np.maximum(heatmap, 0.0)
    scale = np.percentile(pos, percentile)
    if scale <= 0:
        scale = pos.max()    # sparse map: fall back to the true maximum
    red = np.clip(pos / scale, 0.0, 1.0) if scale > 0 else np.zeros_like(pos)
    rgb = np.stack([gray + red * (255.0 - gray), gray * (1 - red),
                    gray * (1 - red)], axis=-1)
    img = np.clip(np.round(rgb), 0, 255).astype(np.uint8)
    out_path = Path(out_path)
    Image.fromarray(img).save(out_path)
    return out_path


def analysis_summary(maps: list[RelevanceMap],
                     aggregates: list[HeatmapAggregate]) -> dict:
    """JSON-ready digest: corner-mass per aggregate, frame distribution of
    the temporal mean, and per-group counts."""
    summary = {"groups": {a.group: {"count": a.count,
                                    "corner_mass": corner_mass(a.mean_map)}
                          for a in aggregates}}
    temporal = [m for m in maps if m.values.ndim == 3
                and m.values.shape[0] % 2 == 0]
    if temporal:
        dist = np.mean([frame_relevance_distribution(m) for m in temporal],
                       axis=0)
        total = dist.sum()
        summary["frame_distribution"] = dist.tolist()
        summary["frame_distribution_fraction"] = \
            (dist / total).tolist() if total else dist.tolist()
    return summary
