"""Chunked binary dataset container with O(1) random access.

File layout (all integers little-endian):

    header   magic ``BOUT1\\0`` | version u16 | split tag (u8 length + utf-8)
             | sample count u64 (patched after the last record is written)
    records  one chunk per sample: meta length u32 | meta JSON | payload
             length u32 | zlib payload | CRC32 u32 over meta+payload
    index    sample count u64 offsets | CRC32 u32 | index offset u64

The payload packs the raw ``spatial`` and ``temporal`` planes back to back;
their shapes and dtypes travel in the JSON meta chunk, so containers holding
different input geometries coexist.  Each record carries its own checksum and
the trailing offset index makes ``container[i]`` a single seek.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"BOUT1\x00"
VERSION = 1
_COMPRESS_LEVEL = 9  # favour size; containers are written once, read many


class ContainerError(Exception):
    """Raised for malformed or corrupt container files."""


@dataclass(frozen=True)
class Provenance:
    """Where an augmented sample came from."""
    event_id: str
    subsample_id: int
    flip: bool
    crop_id: int

    def as_dict(self) -> dict:
        return {"event_id": self.event_id, "subsample_id": self.subsample_id,
                "flip": self.flip, "crop_id": self.crop_id}


@dataclass
class AugmentedSample:
    """One training sample: a grayscale frame plus a quantized flow stack."""
    spatial: np.ndarray              # (H, W) uint8
    temporal: np.ndarray             # (C, H, W) uint8, channel 2k = x, 2k+1 = y
    label: int
    provenance: Provenance
    scale_meta: np.ndarray           # (C, 2) float32 per-channel (min, max)

    def __post_init__(self) -> None:
        self.spatial = np.ascontiguousarray(self.spatial, dtype=np.uint8)
        self.temporal = np.ascontiguousarray(self.temporal, dtype=np.uint8)
        self.scale_meta = np.ascontiguousarray(self.scale_meta, dtype=np.float32)
        if self.spatial.ndim != 2:
            raise ValueError(f"spatial must be 2-D, got {self.spatial.shape}")
        if self.temporal.ndim != 3:
            raise ValueError(f"temporal must be 3-D, got {self.temporal.shape}")
        if self.scale_meta.shape != (self.temporal.shape[0], 2):
            raise ValueError("scale_meta must be (channels, 2), got "
                             f"{self.scale_meta.shape} for {self.temporal.shape[0]} channels")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")


def _encode_record(sample: AugmentedSample) -> bytes:
    meta = {
        "label": int(sample.label),
        "provenance": sample.provenance.as_dict(),
        "spatial_shape": list(sample.spatial.shape),
        "temporal_shape": list(sample.temporal.shape),
        "scale_meta": [[float(a), float(b)] for a, b in sample.scale_meta],
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    payload = zlib.compress(
        sample.spatial.tobytes() + sample.temporal.tobytes(), _COMPRESS_LEVEL)
    crc = zlib.crc32(meta_bytes + payload)
    return b"".join([struct.pack("<I", len(meta_bytes)), meta_bytes,
                     struct.pack("<I", len(payload)), payload,
                     struct.pack("<I", crc)])


def _decode_record(buf: bytes, chunk_id: int) -> AugmentedSample:
    try:
        (meta_len,) = struct.unpack_from("<I", buf, 0)
        meta_bytes = buf[4:4 + meta_len]
        (payload_len,) = struct.unpack_from("<I", buf, 4 + meta_len)
        start = 8 + meta_len
        payload = buf[start:start + payload_len]
        (crc,) = struct.unpack_from("<I", buf, start + payload_len)
    except struct.error as exc:
        raise ContainerError(f"truncated record in chunk {chunk_id}") from exc
    if zlib.crc32(meta_bytes + payload) != crc:
        raise ContainerError(f"checksum failure in chunk {chunk_id}")
    meta = json.loads(meta_bytes)
    raw = zlib.decompress(payload)
    s_shape = tuple(meta["spatial_shape"])
    t_shape = tuple(meta["temporal_shape"])
    s_size = int(np.prod(s_shape))
    spatial = np.frombuffer(raw[:s_size], dtype=np.uint8).reshape(s_shape)
    temporal = np.frombuffer(raw[s_size:], dtype=np.uint8).reshape(t_shape)
    prov = Provenance(**meta["provenance"])
    return AugmentedSample(spatial=spatial.copy(), temporal=temporal.copy(),
                           label=meta["label"], provenance=prov,
                           scale_meta=np.array(meta["scale_meta"], dtype=np.float32))


class ContainerWriter:
    """Streams samples into a container file; use as a context manager."""

    def __init__(self, path: Path, split: str):
        self.path = Path(path)
        self.split = split
        self._fh = open(self.path, "wb")
        tag = split.encode()
        self._fh.write(MAGIC)
        self._fh.write(struct.pack("<H", VERSION))
        self._fh.write(struct.pack("<B", len(tag)) + tag)
        self._count_pos = self._fh.tell()
        self._fh.write(struct.pack("<Q", 0))
        self._offsets: list[int] = []

    def append(self, sample: AugmentedSample) -> None:
        self._offsets.append(self._fh.tell())
        self._fh.write(_encode_record(sample))

    def close(self) -> None:
        index_offset = self._fh.tell()
        index = struct.pack(f"<{len(self._offsets)}Q", *self._offsets)
        self._fh.write(index)
        self._fh.write(struct.pack("<I", zlib.crc32(index)))
        self._fh.write(struct.pack("<Q", index_offset))
        self._fh.seek(self._count_pos)
        self._fh.write(struct.pack("<Q", len(self._offsets)))
        self._fh.close()

    def __enter__(self) -> "ContainerWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class DatasetContainer:
    """Read-only random-access view of a container file."""

    def __init__(self, path: Path):
        self.path = Path(path)
        with open(self.path, "rb") as fh:
            head = fh.read(len(MAGIC))
            if head != MAGIC:
                raise ContainerError(f"{self.path}: bad magic {head!r}")
            (version,) = struct.unpack("<H", fh.read(2))
            if version != VERSION:
                raise ContainerError(f"{self.path}: unsupported version {version}")
            (tag_len,) = struct.unpack("<B", fh.read(1))
            self.split = fh.read(tag_len).decode()
            (self._count,) = struct.unpack("<Q", fh.read(8))
            fh.seek(-8, 2)
            (index_offset,) = struct.unpack("<Q", fh.read(8))
            fh.seek(index_offset)
            index = fh.read(self._count * 8)
            (crc,) = struct.unpack("<I", fh.read(4))
            if zlib.crc32(index) != crc:
                raise ContainerError(f"{self.path}: index checksum failure")
            self._offsets = list(struct.unpack(f"<{self._count}Q", index)) \
                if self._count else []
            self._end = index_offset
        self._fh = open(self.path, "rb")

    def __len__(self) -> int:
        return self._count

    def __getitem__(self, i: int) -> AugmentedSample:
        if not 0 <= i < self._count:
            raise IndexError(i)
        start = self._offsets[i]
        end = self._offsets[i + 1] if i + 1 < self._count else self._end
        self._fh.seek(start)
        return _decode_record(self._fh.read(end - start), chunk_id=i)

    def __iter__(self):
        for i in range(self._count):
            yield self[i]

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self], dtype=np.int64)

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "DatasetContainer":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def write_container(samples, split: str, path: Path) -> DatasetContainer:
    """Write an iterable of samples to ``path`` and return a reader for it."""
    with ContainerWriter(path, split) as w:
        for s in samples:
            w.append(s)
    return DatasetContainer(path)


def read_container(path: Path) -> DatasetContainer:
    return DatasetContainer(path)
