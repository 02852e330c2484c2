"""Raw clip -> standardized 256x256 bout events.

Per frame: min-max normalization, skewness-driven gamma correction,
bladder-anchored cropping.  Per clip: motion-based event extraction into
exactly-150-frame snippets, plus optional whitening of the two 85x85
left-corner squares that carry the agarose artifact.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .synthgen import VideoClip

EVENT_LENGTH = 150
CROP_SIZE = 256
ONSET_BUFFER = 15
BLADDER_THRESHOLD = 3
TAIL_THRESHOLD = 200
MIN_COMPONENT_FRACTION = 0.0001   # 0.01% of the frame
MOTION_SCORE_FRACTION = 0.0038    # of height * width * 255
MOTION_DEBOUNCE = 3               # consecutive above-threshold transitions
CORNER_SIZE = 85


class BladderNotFoundError(ValueError):
    pass


class ClipTooShortError(ValueError):
    pass


@dataclass
class BoutEvent:
    frames: np.ndarray      # (150, 256, 256) uint8
    label: int
    start_index: int
    source_id: str

    def __post_init__(self):
        if self.frames.shape != (EVENT_LENGTH, CROP_SIZE, CROP_SIZE):
            raise ValueError(f"event frames must be ({EVENT_LENGTH}, {CROP_SIZE}, "
                             f"{CROP_SIZE}), got {self.frames.shape}")
        if self.start_index < 0:
            raise ValueError("start_index must be >= 0")


def normalize_frame(frame: np.ndarray) -> np.ndarray:
    """Min-max stretch to the full [0, 255] range; constant frames pass through."""
    frame = np.asarray(frame)
    lo = int(frame.min())
    hi = int(frame.max())
    if hi == lo:
        return frame.astype(np.uint8, copy=True)
    out = np.round(255.0 * (frame.astype(np.float64) - lo) / (hi - lo))
    return out.astype(np.uint8)


def _skewness(values: np.ndarray) -> float:
    """Fisher-Pearson moment coefficient of skewness (biased estimator)."""
    v = values.astype(np.float64).ravel()
    centered = v - v.mean()
    m2 = np.mean(centered ** 2)
    if m2 == 0.0:
        return 0.0
    return float(np.mean(centered ** 3) / m2 ** 1.5)


def gamma_correct(frame: np.ndarray, param: float = 4.3) -> np.ndarray:
    """Apply gamma = exp(-skewness / param) to the [0, 1]-scaled intensities."""
    frame = np.asarray(frame)
    if frame.max() == frame.min():
        warnings.warn("constant frame: gamma correction is the identity")
        return frame.astype(np.uint8, copy=True)
    gamma = np.exp(-_skewness(frame) / param)
    out = 255.0 * (frame.astype(np.float64) / 255.0) ** gamma
    return np.round(out).astype(np.uint8)


def locate_bladder(frame: np.ndarray, frame_id: str = "") -> tuple[int, int]:
    """Right-most pixel of the right-most large dark component.

    Binarizes below intensity 3, drops components smaller than 0.01% of the
    frame, and among the rest picks the component whose right-most pixel has
    the greatest column; ties in the right-most pixel break to the smallest row.
    """
    frame = np.asarray(frame)
    h, w = frame.shape
    mask = frame < BLADDER_THRESHOLD
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    min_area = MIN_COMPONENT_FRACTION * h * w
    best = None
    for comp in range(1, n + 1):
        rows, cols = np.nonzero(labels == comp)
        if len(rows) < min_area:
            continue
        cmax = int(cols.max())
        rmin = int(rows[cols == cmax].min())
        if best is None or (cmax, -rmin) > (best[1], -best[0]):
            best = (rmin, cmax)
    if best is None:
        suffix = f" in frame {frame_id}" if frame_id else ""
        raise BladderNotFoundError(f"bladder not found{suffix}")
    return best


def crop_frame(frame: np.ndarray, bladder: tuple[int, int]) -> np.ndarray:
    """256x256 crop with the bladder's right-most pixel at (row 128, col 0).

    Regions outside the source are padded with background intensity 255.
    """
    frame = np.asarray(frame)
    h, w = frame.shape
    br, bc = bladder
    r0 = br - CROP_SIZE // 2
    c0 = bc
    out = np.full((CROP_SIZE, CROP_SIZE), 255, dtype=np.uint8)
    rs, re = max(0, r0), min(h, r0 + CROP_SIZE)
    cs, ce = max(0, c0), min(w, c0 + CROP_SIZE)
    if rs < re and cs < ce:
        out[rs - r0:re - r0, cs - c0:ce - c0] = frame[rs:re, cs:ce]
    return out


def motion_scores(frames: np.ndarray) -> np.ndarray:
    """Per-transition sum of |intensity difference| over tail pixels.

    Only pixels below the tail threshold (200) in either frame count.
    """
    f = frames.astype(np.int32)
    diffs = np.abs(np.diff(f, axis=0))
    mask = (frames[:-1] < TAIL_THRESHOLD) | (frames[1:] < TAIL_THRESHOLD)
    return (diffs * mask).sum(axis=(1, 2))


def detect_events(frames: np.ndarray, label: int, source_id: str = "") -> list[BoutEvent]:
    """Extract non-overlapping 150-frame events around detected motion.

    The motion flag holds when the score reaches 0.38% of height*width*255;
    an event starts after the flag holds for 3 consecutive transitions, with a
    15-frame buffer prepended.  Starts too close to the end are shifted back
    to fit (possibly overlapping an earlier event, which is logged).  With no
    motion at all, a single event starts at frame 0.
    """
    t_total, h, w = frames.shape
    if t_total < EVENT_LENGTH:
        raise ClipTooShortError(
            f"clip {source_id or '<unnamed>'} has {t_total} frames; need {EVENT_LENGTH}")
    threshold = MOTION_SCORE_FRACTION * h * w * 255
    flags = motion_scores(frames) >= threshold

    events: list[BoutEvent] = []
    spans: list[tuple[int, int]] = []
    i = 0
    while i + MOTION_DEBOUNCE <= len(flags):
        if flags[i:i + MOTION_DEBOUNCE].all():
            motion_start = i + 1
            start = max(0, motion_start - ONSET_BUFFER)
            if start + EVENT_LENGTH > t_total:
                shifted = t_total - EVENT_LENGTH
                warnings.warn(f"event start {start} shifted back to {shifted} "
                              f"to fit the clip ({source_id})")
                start = shifted
            if any(s <= start < e for s, e in spans):
                i += 1
                continue
            spans.append((start, start + EVENT_LENGTH))
            events.append(BoutEvent(frames=frames[start:start + EVENT_LENGTH].copy(),
                                    label=label, start_index=start,
                                    source_id=source_id))
            i = start + EVENT_LENGTH
        else:
            i += 1
    if not events:
        events.append(BoutEvent(frames=frames[:EVENT_LENGTH].copy(), label=label,
                                start_index=0, source_id=source_id))
    return events


def mask_artifacts(event: BoutEvent) -> BoutEvent:
    """Whiten the 85x85 upper- and lower-left corner squares of every frame."""
    frames = event.frames.copy()
    frames[:, :CORNER_SIZE, :CORNER_SIZE] = 255
    frames[:, CROP_SIZE - CORNER_SIZE:, :CORNER_SIZE] = 255
    return BoutEvent(frames=frames, label=event.label,
                     start_index=event.start_index, source_id=event.source_id)


def preprocess_frame(frame: np.ndarray, gamma_param: float = 4.3) -> np.ndarray:
    """Normalize, locate the swim bladder, and cut a bladder-anchored crop.

    Gamma correction is applied only for localization: it darkens the
    bladder blob enough to threshold reliably, but the returned crop is
    taken from the plain normalized frame.
    """
    norm = normalize_frame(frame)
    g = gamma_correct(norm, gamma_param)
    return crop_frame(norm, locate_bladder(g))


def process_clip(clip: VideoClip, label: int, mask_corners: bool = False,
                 gamma_param: float = 4.3) -> list[BoutEvent]:
    """Full preprocessing of one clip into bout events."""
    processed = np.stack([preprocess_frame(f, gamma_param) for f in clip.frames])
    events = detect_events(processed, label, source_id=clip.source_id)
    if mask_corners:
        events = [mask_artifacts(e) for e in events]
    return events


def save_events(events: list[BoutEvent], out_dir: Path) -> Path:
    """Store events as PNG frame directories plus a JSON-lines index."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = out_dir / "events.jsonl"
    with open(index, "a") as f:
        for k, event in enumerate(events):
            name = f"{event.source_id}_e{event.start_index:05d}"
            event_dir = out_dir / name
            event_dir.mkdir(parents=True, exist_ok=True)
            for t, frame in enumerate(event.frames):
                Image.fromarray(frame).save(event_dir / f"frame_{t:04d}.png")
            f.write(json.dumps({"path": name, "source_id": event.source_id,
                                "start_index": event.start_index,
                                "label": event.label}, sort_keys=True) + "\n")
    return index


def load_events(events_dir: Path) -> list[BoutEvent]:
    events_dir = Path(events_dir)
    index = events_dir / "events.jsonl"
    if not index.exists():
        raise IOError(f"no event index at {index}")
    events = []
    for line in index.read_text().splitlines():
        row = json.loads(line)
        event_dir = events_dir / row["path"]
        paths = sorted(event_dir.glob("frame_*.png"))
        frames = np.stack([np.asarray(Image.open(p)) for p in paths])
        events.append(BoutEvent(frames=frames, label=row["label"],
                                start_index=row["start_index"],
                                source_id=row["source_id"]))
    return events
