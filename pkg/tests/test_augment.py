"""Augmentation: gap-bounded subsampling, quantization, event expansion."""

from itertools import combinations

import numpy as np
import pytest

from swimbout.augment import (DESK_AUGMENT, FULL_AUGMENT, FULL_CROP_OFFSETS,
                              AugmentConfig, augment_event, augment_split,
                              block_downscale, dequantize_flow, even_indices,
                              expand_subsample, n_workers, quantize_flow,
                              split_events, subsample_indices, valid_subsample)
from swimbout.preprocess import BoutEvent


def brute_force_subsets(n, k, max_gap):
    return {c for c in combinations(range(n), k)
            if valid_subsample(np.array(c), n, max_gap)}


def make_event(label=0, seed=0, source_id="vidA", start=10):
    """Full-size event whose texture drifts horizontally over time."""
    rng = np.random.default_rng(seed)
    base = rng.integers(60, 200, (256, 256), dtype=np.uint8)
    frames = np.empty((150, 256, 256), dtype=np.uint8)
    for t in range(150):
        frames[t] = np.roll(base, 4 * (t % 3), axis=1)
    return BoutEvent(frames=frames, label=label, source_id=source_id,
                     start_index=start)


def small_config(**kw):
    defaults = dict(n_subsamples=1, keep_frames=9, max_gap=0,
                    even_spacing=True, crop_size=48,
                    crop_offsets=((0, 0), (8, 8)), flips=(False, True),
                    downscale=4, flow_params=DESK_AUGMENT.flow_params)
    defaults.update(kw)
    return AugmentConfig(**defaults)


def test_full_augment_sample_count():
    assert FULL_AUGMENT.samples_per_event == 8 * 2 * 9 == 144
    assert FULL_AUGMENT.temporal_channels == 170
    assert len(FULL_CROP_OFFSETS) == 9


def test_subsample_support_matches_brute_force():
    rng = np.random.default_rng(1)
    for n, k, gap in [(6, 3, 2), (8, 5, 2), (10, 6, 1)]:
        expected = brute_force_subsets(n, k, gap)
        seen = {tuple(subsample_indices(n, k, gap, rng)) for _ in range(3000)}
        assert seen == expected, f"(n={n}, k={k}, max_gap={gap})"


def test_subsample_uniformity():
    rng = np.random.default_rng(2)
    expected = sorted(brute_force_subsets(8, 5, 2))
    draws = 20000
    counts = dict.fromkeys(expected, 0)
    for _ in range(draws):
        counts[tuple(subsample_indices(8, 5, 2, rng))] += 1
    target = draws / len(expected)
    for c in counts.values():
        assert abs(c - target) < 5 * np.sqrt(target)


def test_subsample_validity_at_scale():
    rng = np.random.default_rng(3)
    for _ in range(50):
        idx = subsample_indices(150, 86, 2, rng)
        assert valid_subsample(idx, 150, 2)
        assert idx.min() >= 0 and idx.max() <= 149 and len(idx) == 86


def test_subsample_infeasible_raises():
    with pytest.raises(ValueError):
        subsample_indices(10, 12, 2)
    with pytest.raises(ValueError):
        subsample_indices(10, 2, 2)      # 2 + 2*3 = 8 < 10
    np.testing.assert_array_equal(subsample_indices(5, 5, 0), np.arange(5))


def test_even_indices():
    np.testing.assert_array_equal(even_indices(10, 10), np.arange(10))
    idx = even_indices(150, 17)
    assert idx[0] == 0 and idx[-1] == 149 and len(idx) == 17
    assert (np.diff(idx) > 0).all()


def test_block_downscale():
    frames = np.arange(64, dtype=np.uint8).reshape(1, 8, 8)
    out = block_downscale(frames, 4)
    assert out.shape == (1, 2, 2)
    assert out[0, 0, 0] == round(np.mean(frames[0, :4, :4]))
    assert block_downscale(frames, 1) is frames
    with pytest.raises(ValueError):
        block_downscale(np.zeros((1, 10, 10), dtype=np.uint8), 4)
    # 2-D input keeps its rank
    assert block_downscale(frames[0], 2).shape == (4, 4)


def test_quantize_dequantize_roundtrip():
    rng = np.random.default_rng(4)
    dx = rng.normal(scale=3.0, size=(32, 32)).astype(np.float32)
    dy = rng.normal(scale=0.5, size=(32, 32)).astype(np.float32)
    planes, meta = quantize_flow(dx, dy)
    assert planes.dtype == np.uint8 and planes.shape == (2, 32, 32)
    back = dequantize_flow(planes, meta)
    step_x = (meta[0, 1] - meta[0, 0]) / 255.0
    step_y = (meta[1, 1] - meta[1, 0]) / 255.0
    assert np.abs(back[0] - dx).max() <= step_x / 2 + 1e-6
    assert np.abs(back[1] - dy).max() <= step_y / 2 + 1e-6


def test_quantize_constant_channel_and_nonfinite():
    dx = np.full((8, 8), 2.5, dtype=np.float32)
    dy = np.zeros((8, 8), dtype=np.float32)
    planes, meta = quantize_flow(dx, dy)
    assert (planes == 0).all()
    np.testing.assert_allclose(meta[0], (2.5, 2.5))
    np.testing.assert_allclose(dequantize_flow(planes, meta)[0], 2.5)
    with pytest.raises(FloatingPointError):
        quantize_flow(np.array([[np.nan]]), np.array([[0.0]]))


def test_jpeg_codec_lossy_but_close():
    rng = np.random.default_rng(5)
    dx = rng.normal(size=(64, 64)).astype(np.float32)
    dy = rng.normal(size=(64, 64)).astype(np.float32)
    exact, _ = quantize_flow(dx, dy, codec="none")
    lossy, _ = quantize_flow(dx, dy, codec="jpeg40")
    assert not np.array_equal(exact, lossy)
    assert np.abs(exact.astype(int) - lossy.astype(int)).mean() < 30
    with pytest.raises(ValueError):
        AugmentConfig(codec="webp")


def test_expand_subsample_structure():
    event = make_event()
    idx = even_indices(150, 9)
    samples = expand_subsample(event, idx, np.random.default_rng(0),
                               small_config())
    assert len(samples) == 4                     # 2 flips x 2 crops
    s = samples[0]
    assert s.spatial.shape == (48, 48)
    assert s.temporal.shape == (16, 48, 48)      # 2 * (9 - 1) channels
    assert s.scale_meta.shape == (16, 2)
    assert s.provenance.event_id == "vidA_e00010"
    flips = {s.provenance.flip for s in samples}
    crops = {s.provenance.crop_id for s in samples}
    assert flips == {False, True} and crops == {0, 1}


def test_flip_negates_vertical_flow():
    event = make_event()
    config = small_config(keep_frames=5, crop_size=64, crop_offsets=((0, 0),))
    plain, flipped = expand_subsample(event, even_indices(150, 5),
                                      np.random.default_rng(0), config)
    np.testing.assert_array_equal(flipped.spatial, plain.spatial[::-1])
    fx = dequantize_flow(plain.temporal[:2], plain.scale_meta[:2])
    gx = dequantize_flow(flipped.temporal[:2], flipped.scale_meta[:2])
    np.testing.assert_allclose(gx[0], fx[0][::-1], atol=0.06)   # x unchanged
    np.testing.assert_allclose(gx[1], -fx[1][::-1], atol=0.06)  # y negated


def test_augment_event_count_and_determinism():
    event = make_event()
    config = small_config(n_subsamples=3, keep_frames=8, max_gap=21,
                          even_spacing=False,
                          crop_offsets=((0, 0), (16, 16)))
    a = augment_event(event, np.random.default_rng(9), config)
    b = augment_event(event, np.random.default_rng(9), config)
    assert len(a) == config.samples_per_event == 12
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.temporal, y.temporal)
        np.testing.assert_array_equal(x.spatial, y.spatial)
        assert x.provenance == y.provenance


def test_split_events_by_source_without_leakage():
    frames = np.zeros((150, 256, 256), dtype=np.uint8)   # shared; split only
    events = [BoutEvent(frames=frames, label=0, source_id=f"vid{j:02d}",
                        start_index=i)
              for j in range(19) for i in range(2)]
    splits = split_events(events, (28, 4, 6), seed=1)
    assert sum(len(v) for v in splits.values()) == len(events)
    seen = {}
    for name, evs in splits.items():
        for e in evs:
            assert seen.setdefault(e.source_id, name) == name
    # both events of each source travel together
    assert len(splits["train"]) > len(splits["test"]) > 0
    with pytest.raises(ValueError):
        split_events(events, (0, 0, 0))


def test_augment_split_writes_container(tmp_path):
    events = [make_event(label=i % 2, source_id=f"v{i}", seed=i)
              for i in range(3)]
    ds = augment_split(events, "train", tmp_path / "t.bouts",
                       config=DESK_AUGMENT, seed=3)
    assert len(ds) == 3 * DESK_AUGMENT.samples_per_event
    assert ds.split == "train"
    assert set(ds.labels()) == {0, 1}
    ds.close()


def test_augment_split_worker_count_invariance(tmp_path, monkeypatch):
    events = [make_event(label=i % 2, source_id=f"v{i}", seed=i)
              for i in range(3)]
    monkeypatch.setenv("SWIMBOUT_WORKERS", "1")
    a = augment_split(events, "train", tmp_path / "a.bouts",
                      config=DESK_AUGMENT, seed=5)
    monkeypatch.setenv("SWIMBOUT_WORKERS", "2")
    assert n_workers() == 2
    b = augment_split(events, "train", tmp_path / "b.bouts",
                      config=DESK_AUGMENT, seed=5)
    assert len(a) == len(b)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.temporal, y.temporal)
        assert x.provenance == y.provenance
    a.close()
    b.close()


def test_n_workers_invalid_env(monkeypatch):
    monkeypatch.setenv("SWIMBOUT_WORKERS", "lots")
    with pytest.warns(UserWarning):
        assert n_workers() == 1
