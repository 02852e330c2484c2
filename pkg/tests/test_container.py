"""Chunked dataset container: round trips, random access, corruption."""

import numpy as np
import pytest

from swimbout.container import (AugmentedSample, ContainerError,
                                ContainerWriter, DatasetContainer, Provenance,
                                read_container, write_container)


def make_sample(i, label=None, h=16, w=16, channels=6):
    rng = np.random.default_rng(i)
    return AugmentedSample(
        spatial=rng.integers(0, 256, (h, w), dtype=np.uint8),
        temporal=rng.integers(0, 256, (channels, h, w), dtype=np.uint8),
        label=(i % 2) if label is None else label,
        provenance=Provenance(event_id=f"ev{i:03d}", subsample_id=i % 8,
                              flip=bool(i % 2), crop_id=i % 9),
        scale_meta=rng.normal(size=(channels, 2)).astype(np.float32),
    )


def test_sample_validation():
    good = make_sample(0)
    with pytest.raises(ValueError):
        AugmentedSample(spatial=np.zeros((4, 4, 1), dtype=np.uint8),
                        temporal=good.temporal, label=0,
                        provenance=good.provenance, scale_meta=good.scale_meta)
    with pytest.raises(ValueError):
        AugmentedSample(spatial=good.spatial, temporal=good.temporal, label=2,
                        provenance=good.provenance, scale_meta=good.scale_meta)
    with pytest.raises(ValueError):
        AugmentedSample(spatial=good.spatial, temporal=good.temporal, label=0,
                        provenance=good.provenance,
                        scale_meta=np.zeros((3, 2), dtype=np.float32))


def test_roundtrip_preserves_everything(tmp_path):
    samples = [make_sample(i) for i in range(12)]
    ds = write_container(samples, "train", tmp_path / "d.bouts")
    assert len(ds) == 12
    assert ds.split == "train"
    for orig, back in zip(samples, ds):
        np.testing.assert_array_equal(back.spatial, orig.spatial)
        np.testing.assert_array_equal(back.temporal, orig.temporal)
        np.testing.assert_allclose(back.scale_meta, orig.scale_meta, rtol=1e-7)
        assert back.label == orig.label
        assert back.provenance == orig.provenance
    np.testing.assert_array_equal(ds.labels(), [i % 2 for i in range(12)])
    ds.close()


def test_random_access_without_full_scan(tmp_path):
    ds = write_container((make_sample(i) for i in range(30)), "valid",
                         tmp_path / "d.bouts")
    assert ds[17].provenance.event_id == "ev017"
    assert ds[0].provenance.event_id == "ev000"
    assert ds[29].provenance.event_id == "ev029"
    with pytest.raises(IndexError):
        ds[30]
    with pytest.raises(IndexError):
        ds[-1]
    ds.close()


def test_variable_shapes_coexist(tmp_path):
    samples = [make_sample(0, h=8, w=10, channels=4),
               make_sample(1, h=32, w=32, channels=16)]
    ds = write_container(samples, "train", tmp_path / "d.bouts")
    assert ds[0].temporal.shape == (4, 8, 10)
    assert ds[1].temporal.shape == (16, 32, 32)
    ds.close()


def test_empty_container(tmp_path):
    ds = write_container([], "test", tmp_path / "d.bouts")
    assert len(ds) == 0
    assert list(ds) == []
    ds.close()


def test_context_managers(tmp_path):
    with ContainerWriter(tmp_path / "d.bouts", "train") as w:
        w.append(make_sample(1))
    with read_container(tmp_path / "d.bouts") as ds:
        assert len(ds) == 1


def test_bad_magic_rejected(tmp_path):
    p = tmp_path / "junk.bouts"
    p.write_bytes(b"GARBAGE!" + bytes(64))
    with pytest.raises(ContainerError):
        DatasetContainer(p)


def test_payload_corruption_detected(tmp_path):
    p = tmp_path / "d.bouts"
    write_container([make_sample(i) for i in range(3)], "train", p).close()
    raw = bytearray(p.read_bytes())
    # the middle of the file sits inside a record's compressed payload
    raw[len(raw) // 2] ^= 0xFF
    p.write_bytes(bytes(raw))
    ds = DatasetContainer(p)
    with pytest.raises(ContainerError):
        for _ in ds:
            pass
    ds.close()


def test_index_corruption_detected(tmp_path):
    p = tmp_path / "d.bouts"
    write_container([make_sample(i) for i in range(3)], "train", p).close()
    raw = bytearray(p.read_bytes())
    raw[-10] ^= 0xFF                      # inside the offset index
    p.write_bytes(bytes(raw))
    with pytest.raises(ContainerError):
        DatasetContainer(p)


def test_truncated_file_rejected(tmp_path):
    p = tmp_path / "d.bouts"
    write_container([make_sample(i) for i in range(3)], "train", p).close()
    p.write_bytes(p.read_bytes()[:40])
    with pytest.raises((ContainerError, Exception)):
        DatasetContainer(p)
