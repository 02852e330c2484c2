"""Preprocessing: normalization, gamma, bladder crop, motion events."""

import numpy as np
import pytest

from swimbout.preprocess import (CORNER_SIZE, CROP_SIZE, EVENT_LENGTH,
                                 ONSET_BUFFER, BladderNotFoundError, BoutEvent,
                                 ClipTooShortError, crop_frame, detect_events,
                                 gamma_correct, locate_bladder, mask_artifacts,
                                 motion_scores, normalize_frame,
                                 preprocess_frame, process_clip)
from swimbout.synthgen import SynthSpec, generate_bout


def test_normalize_stretches_full_range():
    frame = np.array([[10, 20], [30, 60]], dtype=np.uint8)
    out = normalize_frame(frame)
    assert out.dtype == np.uint8
    assert out.min() == 0 and out.max() == 255
    # order preserved and linear: 20 -> round(255*10/50) = 51
    assert out[0, 1] == 51


def test_normalize_constant_frame_passthrough():
    frame = np.full((4, 4), 7, dtype=np.uint8)
    assert np.array_equal(normalize_frame(frame), frame)


def test_gamma_exponent_from_skewness():
    # Left-skewed data (mass near 255) must be darkened: gamma > 1 pushes
    # mid intensities down, so the median decreases.
    rng = np.random.default_rng(0)
    bright = np.clip(255 - rng.exponential(20, (64, 64)), 0, 255).astype(np.uint8)
    out = gamma_correct(bright)
    assert np.median(out) < np.median(bright)
    # Right-skewed data gets gamma < 1 (brightened).
    dark = np.clip(rng.exponential(20, (64, 64)), 0, 255).astype(np.uint8)
    assert np.median(gamma_correct(dark)) >= np.median(dark)


def test_gamma_constant_frame_warns_identity():
    with pytest.warns(UserWarning):
        out = gamma_correct(np.full((8, 8), 9, dtype=np.uint8))
    assert np.all(out == 9)


def test_locate_bladder_picks_rightmost_large_component():
    frame = np.full((256, 256), 200, dtype=np.uint8)
    frame[10:14, 5:9] = 0          # left blob
    frame[40:44, 30:34] = 0        # right blob -> wins
    frame[50, 60] = 0              # single pixel: below the 0.01% area floor
    assert locate_bladder(frame) == (40, 33)


def test_locate_bladder_missing_raises():
    with pytest.raises(BladderNotFoundError):
        locate_bladder(np.full((64, 64), 200, dtype=np.uint8))


def test_crop_anchors_bladder_and_pads_white():
    frame = np.zeros((300, 300), dtype=np.uint8)
    frame[150, 100] = 17
    out = crop_frame(frame, (150, 100))
    assert out.shape == (CROP_SIZE, CROP_SIZE)
    assert out[CROP_SIZE // 2, 0] == 17          # bladder pixel at (128, 0)
    assert np.all(out[:, 200:] == 255)           # beyond source: padded 255
    assert np.all(out[:, :200] == frame[22:278, 100:300])


def test_motion_scores_static_zero():
    frames = np.full((5, 32, 32), 120, dtype=np.uint8)
    assert np.all(motion_scores(frames) == 0)


def test_motion_scores_ignore_bright_pixels():
    frames = np.full((2, 32, 32), 230, dtype=np.uint8)
    frames[1] = 245   # both frames above the 200 threshold: no tail pixels
    assert motion_scores(frames)[0] == 0


def test_detect_events_static_clip_fallback():
    frames = np.full((EVENT_LENGTH + 10, CROP_SIZE, CROP_SIZE), 255,
                     dtype=np.uint8)
    events = detect_events(frames, label=0, source_id="s")
    assert len(events) == 1
    assert events[0].start_index == 0


def test_detect_events_too_short_raises():
    with pytest.raises(ClipTooShortError):
        detect_events(np.zeros((100, CROP_SIZE, CROP_SIZE), np.uint8), 0)


def test_detect_events_applies_onset_buffer():
    t = EVENT_LENGTH + 60
    frames = np.full((t, CROP_SIZE, CROP_SIZE), 255, dtype=np.uint8)
    # inject strong dark motion for transitions 40..50
    rng = np.random.default_rng(0)
    for k in range(40, 52):
        patch = (rng.random((120, 120)) * 150).astype(np.uint8)
        frames[k, 60:180, 60:180] = patch
    events = detect_events(frames, label=1, source_id="m")
    # first flagged transition is 39 (frame 39 -> 40), debounce holds for
    # 39..41 -> motion_start 40, minus the 15-frame buffer
    assert events[0].start_index == 40 - ONSET_BUFFER


def test_detect_events_shift_back_to_fit():
    t = EVENT_LENGTH + 10
    frames = np.full((t, CROP_SIZE, CROP_SIZE), 255, dtype=np.uint8)
    rng = np.random.default_rng(1)
    for k in range(t - 12, t - 1):
        frames[k, 60:180, 60:180] = (rng.random((120, 120)) * 150).astype(np.uint8)
    with pytest.warns(UserWarning, match="shifted back"):
        events = detect_events(frames, label=0, source_id="late")
    assert events[0].start_index == t - EVENT_LENGTH


def test_mask_artifacts_blanks_left_corners_only():
    frames = np.zeros((EVENT_LENGTH, CROP_SIZE, CROP_SIZE), dtype=np.uint8)
    event = BoutEvent(frames=frames, label=0, start_index=0, source_id="x")
    masked = mask_artifacts(event)
    assert np.all(masked.frames[:, :CORNER_SIZE, :CORNER_SIZE] == 255)
    assert np.all(masked.frames[:, -CORNER_SIZE:, :CORNER_SIZE] == 255)
    assert np.all(masked.frames[:, :CORNER_SIZE, CORNER_SIZE:] == 0)
    assert np.all(event.frames == 0)   # input untouched


def test_preprocess_frame_localizes_generated_bladder():
    spec = SynthSpec(n_videos=1, frame_size=(256, 256), frames_per_video=180,
                     seed=11)
    clip = generate_bout(spec, 1, np.random.default_rng(11), source_id="c")
    frame = clip.frames[0]
    norm = normalize_frame(frame)
    found = locate_bladder(gamma_correct(norm))
    truth = clip.log.bladder_right_edge
    assert abs(found[0] - truth[0]) <= 1
    assert abs(found[1] - truth[1]) <= 1
    out = preprocess_frame(frame)
    assert out.shape == (CROP_SIZE, CROP_SIZE)
    # the bladder interior is dark at the anchor row right of the crop edge
    assert out[CROP_SIZE // 2, 0] < 10


@pytest.mark.parametrize("label", [0, 1])
def test_process_clip_onset_recovered_within_tolerance(label):
    spec = SynthSpec(n_videos=1, frame_size=(256, 256), frames_per_video=180,
                     seed=23 + label)
    clip = generate_bout(spec, label, np.random.default_rng(23 + label),
                         source_id="c")
    events = process_clip(clip, label)
    assert len(events) == 1
    detected_onset = events[0].start_index + ONSET_BUFFER
    assert abs(detected_onset - clip.log.onset) <= 3
