"""
Binary containers: TSRD datasets, TSRV volume files and TSWT checkpoints.

All formats are little-endian.

TSRD (dataset)::

    "TSRD" u16 version=1 u16 record_count
    per record:
        u32 name_length, UTF-8 name
        u32 ranges, u32 azimuths, u32 elevation_bins, u32 baselines (N)
        f64 wavelength, reference_range, incidence_deg, elevation_spacing,
            elevation_origin, range_spacing, azimuth_spacing,
            platform_height (NaN when unset), snr_db (inf when noiseless),
            then N baselines
        echoes: N*ranges*azimuths complex as interleaved f32 (re, im), baseline-major
        ground truth: ranges*azimuths*elevation_bins f32, range-major
        point cloud: u32 count, count*3 f32 coordinates, count f32 amplitudes

TSRV (standalone volumes)::

    "TSRV" u16 version=1 u16 volume_count
    per volume: u32 name_length, UTF-8 name, u32 x 3 dims, f32 data range-major

TSWT (checkpoint)::

    "TSWT" u16 version=1 u32 entry_count
    per entry: u32 name_length, UTF-8 name, u32 ndim, u32 x ndim dims, f64 data
    optimizer section: u64 step, u32 moment_count, moments in the entry layout
"""

import json
import logging
import math
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .errors import CheckpointError, ContainerError
from .geometry import TomoGeometry
from .simulator import DatasetRecord, EchoTensor, PointCloud, ReflectivityVolume, make_split

logger = logging.getLogger(__name__)

DATASET_MAGIC = b"TSRD"
VOLUME_MAGIC = b"TSRV"
CHECKPOINT_MAGIC = b"TSWT"
FORMAT_VERSION = 1

_F32 = np.dtype("<f4")
_F64 = np.dtype("<f8")


class _Reader:
    """Sequential little-endian reader over an in-memory buffer."""

    def __init__(self, buffer: bytes, path: str):
        self.buffer = buffer
        self.offset = 0
        self.path = path

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.offset + size > len(self.buffer):
            raise ContainerError(f"{self.path}: truncated at byte {self.offset}")
        values = struct.unpack_from(fmt, self.buffer, self.offset)
        self.offset += size
        return values

    def array(self, dtype: np.dtype, count: int) -> np.ndarray:
        size = dtype.itemsize * count
        if self.offset + size > len(self.buffer):
            raise ContainerError(f"{self.path}: truncated at byte {self.offset}")
        data = np.frombuffer(self.buffer, dtype=dtype, count=count, offset=self.offset).copy()
        self.offset += size
        return data

    def name(self) -> str:
        (length,) = self.unpack("<I")
        raw = self.array(np.dtype("u1"), length).tobytes()
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise ContainerError(f"{self.path}: invalid UTF-8 name at byte {self.offset}") from e

    def magic(self, expected: bytes) -> int:
        magic = self.array(np.dtype("u1"), 4).tobytes()
        if magic != expected:
            raise ContainerError(f"{self.path}: bad magic {magic!r}, expected {expected!r}")
        (version,) = self.unpack("<H")
        if version != FORMAT_VERSION:
            raise ContainerError(f"{self.path}: unsupported version {version}")
        return version

    def done(self) -> bool:
        return self.offset == len(self.buffer)


def _name_bytes(name: str) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _read_file(path: str) -> bytes:
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError as e:
        raise ContainerError(f"cannot read {path}: {e}") from e


def _write_file(path: str, chunks: Sequence[bytes]) -> None:
    try:
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok=True)
        with open(path, "wb") as f:
            for chunk in chunks:
                f.write(chunk)
    except OSError as e:
        raise ContainerError(f"cannot write {path}: {e}") from e


# --- TSRD -------------------------------------------------------------------

def _geometry_block(geom: TomoGeometry, snr_db: float) -> bytes:
    height = math.nan if geom.platform_height is None else geom.platform_height
    values = [geom.wavelength, geom.reference_range, geom.incidence_deg, geom.elevation_spacing,
              geom.elevation_origin, geom.range_spacing, geom.azimuth_spacing, height, snr_db]
    values.extend(geom.baselines)
    return np.asarray(values, dtype=_F64).tobytes()


def _encode_record(record: DatasetRecord) -> List[bytes]:
    geom = record.geometry
    n, ranges, azimuths = record.echoes.shape
    volume = record.truth.data
    if volume.shape != (ranges, azimuths, geom.elevation_bins) or n != geom.n_baselines:
        raise ContainerError(
            f"record {record.name}: echo {record.echoes.shape} and volume {volume.shape} "
            f"do not match geometry ({geom.n_baselines} baselines, {geom.elevation_bins} bins)")
    echoes = np.empty(record.echoes.data.shape + (2,), dtype=_F32)
    echoes[..., 0] = record.echoes.data.real
    echoes[..., 1] = record.echoes.data.imag
    cloud = record.cloud
    return [
        _name_bytes(record.name),
        struct.pack("<4I", ranges, azimuths, geom.elevation_bins, n),
        _geometry_block(geom, record.echoes.snr_db),
        echoes.tobytes(),
        np.ascontiguousarray(volume, dtype=_F32).tobytes(),
        struct.pack("<I", len(cloud)),
        np.ascontiguousarray(cloud.points, dtype=_F32).tobytes(),
        np.ascontiguousarray(cloud.amplitudes, dtype=_F32).tobytes(),
    ]


def write_dataset(path: str, records: Sequence[DatasetRecord]) -> None:
    """Write records to a TSRD container in the given order."""
    if len(records) > 0xFFFF:
        raise ContainerError(f"{path}: at most 65535 records per container, got {len(records)}")
    chunks = [DATASET_MAGIC, struct.pack("<HH", FORMAT_VERSION, len(records))]
    for record in records:
        chunks.extend(_encode_record(record))
    _write_file(path, chunks)
    logger.info("wrote %d records to %s", len(records), path)


def read_dataset(path: str) -> List[DatasetRecord]:
    """Read every record of a TSRD container."""
    reader = _Reader(_read_file(path), path)
    reader.magic(DATASET_MAGIC)
    (count,) = reader.unpack("<H")
    records = []
    for _ in range(count):
        name = reader.name()
        ranges, azimuths, bins, n = reader.unpack("<4I")
        block = reader.array(_F64, 9 + n)
        try:
            geom = TomoGeometry(
                baselines=tuple(block[9:]), wavelength=float(block[0]), reference_range=float(block[1]),
                incidence_deg=float(block[2]), elevation_bins=int(bins), elevation_spacing=float(block[3]),
                elevation_origin=float(block[4]), range_spacing=float(block[5]),
                azimuth_spacing=float(block[6]),
                platform_height=None if math.isnan(block[7]) else float(block[7]))
        except ValueError as e:
            raise ContainerError(f"{path}: record {name} has an invalid geometry: {e}") from e
        snr_db = float(block[8])
        raw = reader.array(_F32, n * ranges * azimuths * 2).reshape(n, ranges, azimuths, 2)
        echoes = EchoTensor(data=raw[..., 0] + 1j * raw[..., 1], snr_db=snr_db,
                            geometry_id=geom.identifier)
        volume = reader.array(_F32, ranges * azimuths * bins).reshape(ranges, azimuths, bins)
        (points,) = reader.unpack("<I")
        coordinates = reader.array(_F32, points * 3).reshape(points, 3)
        amplitudes = reader.array(_F32, points)
        records.append(DatasetRecord(
            name=name, geometry=geom, echoes=echoes,
            truth=ReflectivityVolume(data=volume, geometry_id=geom.identifier),
            cloud=PointCloud(coordinates, amplitudes)))
    if not reader.done():
        raise ContainerError(f"{path}: {len(reader.buffer) - reader.offset} trailing bytes")
    return records


def split_path(dataset_path: str) -> str:
    return os.path.splitext(dataset_path)[0] + ".split.json"


def write_split(path: str, split: Mapping[str, Sequence[int]]) -> None:
    try:
        with open(path, "w", encoding="utf-8") as f:
            json.dump({key: list(map(int, value)) for key, value in split.items()}, f, indent=2)
    except OSError as e:
        raise ContainerError(f"cannot write {path}: {e}") from e


def read_split(dataset_path: str, count: int) -> Dict[str, List[int]]:
    """Split indices stored next to a dataset, or the seed-0 default when the sidecar is missing."""
    path = split_path(dataset_path)
    if not os.path.exists(path):
        logger.warning("no split file %s; using the default split", path)
        return make_split(count, 0)
    try:
        with open(path, "r", encoding="utf-8") as f:
            split = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ContainerError(f"cannot read {path}: {e}") from e
    for key in ("train", "val", "test"):
        indices = split.get(key, [])
        if any(not (0 <= int(i) < count) for i in indices):
            raise ContainerError(f"{path}: '{key}' indices out of range for {count} records")
        split[key] = [int(i) for i in indices]
    return split


# --- TSRV -------------------------------------------------------------------

def write_volumes(path: str, volumes: Mapping[str, np.ndarray]) -> None:
    """Write named (range, azimuth, elevation) volumes to a TSRV file."""
    chunks = [VOLUME_MAGIC, struct.pack("<HH", FORMAT_VERSION, len(volumes))]
    for name, volume in volumes.items():
        volume = np.asarray(volume)
        if volume.ndim != 3:
            raise ContainerError(f"volume {name} must be 3-D, got shape {volume.shape}")
        chunks.append(_name_bytes(name))
        chunks.append(struct.pack("<3I", *volume.shape))
        chunks.append(np.ascontiguousarray(volume, dtype=_F32).tobytes())
    _write_file(path, chunks)


def read_volumes(path: str) -> "OrderedDict[str, np.ndarray]":
    reader = _Reader(_read_file(path), path)
    reader.magic(VOLUME_MAGIC)
    (count,) = reader.unpack("<H")
    volumes = OrderedDict()
    for _ in range(count):
        name = reader.name()
        dims = reader.unpack("<3I")
        volumes[name] = reader.array(_F32, int(np.prod(dims))).reshape(dims)
    if not reader.done():
        raise ContainerError(f"{path}: trailing bytes after {count} volumes")
    return volumes


# --- TSWT -------------------------------------------------------------------

@dataclass
class Checkpoint:
    """Named f64 arrays plus the optimizer section."""
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    step: int = 0
    moments: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)


def _encode_entries(entries: Mapping[str, np.ndarray]) -> List[bytes]:
    chunks = []
    for name, value in entries.items():
        value = np.asarray(value, dtype=_F64)
        chunks.append(_name_bytes(name))
        chunks.append(struct.pack(f"<I{value.ndim}I", value.ndim, *value.shape))
        chunks.append(np.ascontiguousarray(value).tobytes())
    return chunks


def _decode_entries(reader: _Reader, count: int) -> "OrderedDict[str, np.ndarray]":
    entries = OrderedDict()
    for _ in range(count):
        name = reader.name()
        (ndim,) = reader.unpack("<I")
        dims = reader.unpack(f"<{ndim}I") if ndim else ()
        entries[name] = reader.array(_F64, int(np.prod(dims))).reshape(dims)
    return entries


def write_checkpoint(path: str, checkpoint: Checkpoint) -> None:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<HI", FORMAT_VERSION, len(checkpoint.tensors))]
    chunks.extend(_encode_entries(checkpoint.tensors))
    chunks.append(struct.pack("<QI", checkpoint.step, len(checkpoint.moments)))
    chunks.extend(_encode_entries(checkpoint.moments))
    _write_file(path, chunks)


def read_checkpoint(path: str) -> Checkpoint:
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint {path} does not exist")
    reader = _Reader(_read_file(path), path)
    try:
        reader.magic(CHECKPOINT_MAGIC)
        (count,) = reader.unpack("<I")
        tensors = _decode_entries(reader, count)
        step, moment_count = reader.unpack("<QI")
        moments = _decode_entries(reader, moment_count)
    except ContainerError as e:
        raise CheckpointError(str(e)) from e
    if not reader.done():
        raise CheckpointError(f"{path}: trailing bytes after optimizer section")
    return Checkpoint(tensors=tensors, step=int(step), moments=moments)


def select_records(records: Sequence[DatasetRecord], indices: Optional[Sequence[int]]) -> List[DatasetRecord]:
    if indices is None:
        return list(records)
    return [records[i] for i in indices]
