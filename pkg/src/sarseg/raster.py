"""Core raster types, the SRF binary format, tiling, and dataset splitting.

All pixel payloads are numpy arrays in channel-planar, row-major layout:
complex data is (channels, height, width) complex64, real feature planes
are (height, width) or (channels, height, width) float32, label maps are
(height, width) uint8. Everything is immutable by convention after
construction and safe to share across workers.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Sequence, Union

import numpy as np

SRF_MAGIC = b"SRF1"
SRF_VERSION = 1
_HEADER = struct.Struct("<4sBBHIQQ")  # magic, dtype, reserved, version, channels, width, height

DTYPE_F32 = 0
DTYPE_C64 = 1
DTYPE_U8 = 2

LABEL_OTHER = 0
LABEL_BUILDING = 1
LABEL_ROAD = 2
LABEL_UNLABELED = 255
VALID_LABELS = (LABEL_OTHER, LABEL_BUILDING, LABEL_ROAD, LABEL_UNLABELED)


class SrfFormatError(ValueError):
    """Raised for malformed SRF files; carries the byte offset of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class ComplexRaster:
    """One SAR recording: multi-channel complex samples on a pixel grid."""

    data: np.ndarray  # (channels, height, width) complex64
    recording_id: int = 0
    resolution_m: float = 0.15

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 3:
            raise ValueError(f"complex raster data must be (channels, height, width), got ndim={d.ndim}")
        if d.dtype != np.complex64:
            d = d.astype(np.complex64)
        if not np.all(np.isfinite(d.view(np.float32))):
            raise ValueError("complex raster contains non-finite samples")
        object.__setattr__(self, "data", d)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def channel(self, ch: int) -> np.ndarray:
        """Return the 2D complex plane of 1-based channel `ch`."""
        if not 1 <= ch <= self.channels:
            raise ValueError(f"channel {ch} not in 1..{self.channels}")
        return self.data[ch - 1]


@dataclass(frozen=True)
class Plane:
    """A single real-valued feature map."""

    values: np.ndarray  # (height, width) float32

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise ValueError(f"plane values must be 2D, got ndim={v.ndim}")
        if v.dtype != np.float32:
            v = v.astype(np.float32)
        if not np.all(np.isfinite(v)):
            raise ValueError("plane contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class PlaneStack:
    """Several real-valued planes sharing one grid (a multi-channel f32 raster)."""

    values: np.ndarray  # (channels, height, width) float32

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3:
            raise ValueError(f"plane stack values must be (channels, height, width), got ndim={v.ndim}")
        if v.dtype != np.float32:
            v = v.astype(np.float32)
        if not np.all(np.isfinite(v)):
            raise ValueError("plane stack contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    def plane(self, i: int) -> Plane:
        return Plane(self.values[i])


@dataclass(frozen=True)
class LabelRaster:
    """Per-pixel class codes: 0 other, 1 building, 2 road, 255 unlabeled."""

    labels: np.ndarray  # (height, width) uint8

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise ValueError(f"labels must be 2D, got ndim={lab.ndim}")
        if lab.dtype != np.uint8:
            lab = lab.astype(np.uint8)
        bad = ~np.isin(lab, VALID_LABELS)
        if bad.any():
            raise ValueError(f"labels contain invalid codes: {sorted(np.unique(lab[bad]).tolist())}")
        object.__setattr__(self, "labels", lab)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


Raster = Union[ComplexRaster, Plane, PlaneStack, LabelRaster]


@dataclass(frozen=True)
class TileIndex:
    """Grid positions of non-overlapping square tiles cut from one raster.

    Border remainders smaller than tile_size are not covered; `positions`
    lists (row_offset, col_offset) of each tile's top-left pixel in
    row-major grid order.
    """

    tile_size: int
    width: int
    height: int
    positions: tuple = field(default_factory=tuple)  # ((y, x), ...)

    @property
    def grid_shape(self) -> tuple:
        return (self.height // self.tile_size, self.width // self.tile_size)

    def tile_id(self, i: int) -> str:
        y, x = self.positions[i]
        return f"tile_{y // self.tile_size:03d}_{x // self.tile_size:03d}"

    def ids(self) -> list:
        return [self.tile_id(i) for i in range(len(self.positions))]


# --------------------------------------------------------------------------
# SRF I/O
# --------------------------------------------------------------------------

def _payload(r: Raster) -> tuple:
    """Return (dtype code, channels, height, width, payload bytes)."""
    if isinstance(r, ComplexRaster):
        return DTYPE_C64, r.channels, r.height, r.width, np.ascontiguousarray(r.data.astype("<c8")).tobytes()
    if isinstance(r, Plane):
        return DTYPE_F32, 1, r.height, r.width, np.ascontiguousarray(r.values.astype("<f4")).tobytes()
    if isinstance(r, PlaneStack):
        return DTYPE_F32, r.channels, r.height, r.width, np.ascontiguousarray(r.values.astype("<f4")).tobytes()
    if isinstance(r, LabelRaster):
        return DTYPE_U8, 1, r.height, r.width, np.ascontiguousarray(r.labels).tobytes()
    raise TypeError(f"not a raster type: {type(r).__name__}")


def write_raster_stream(r: Raster, stream: BinaryIO) -> None:
    dtype, channels, height, width, payload = _payload(r)
    stream.write(_HEADER.pack(SRF_MAGIC, dtype, 0, SRF_VERSION, channels, width, height))
    stream.write(payload)


def write_raster(r: Raster, path) -> None:
    """Write any raster type to `path` in the SRF format (little-endian)."""
    with open(path, "wb") as f:
        write_raster_stream(r, f)


def read_raster_stream(stream: BinaryIO) -> Raster:
    head = stream.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise SrfFormatError(f"truncated header: {len(head)} of {_HEADER.size} bytes", len(head))
    magic, dtype, _reserved, version, channels, width, height = _HEADER.unpack(head)
    if magic != SRF_MAGIC:
        raise SrfFormatError(f"bad magic {magic!r}, expected {SRF_MAGIC!r}", 0)
    if dtype not in (DTYPE_F32, DTYPE_C64, DTYPE_U8):
        raise SrfFormatError(f"unknown dtype code {dtype}", 4)
    if version != SRF_VERSION:
        raise SrfFormatError(f"unsupported version {version}", 6)
    if channels < 1 or width < 1 or height < 1:
        raise SrfFormatError(f"degenerate dims {channels}x{height}x{width}", 8)

    itemsize = {DTYPE_F32: 4, DTYPE_C64: 8, DTYPE_U8: 1}[dtype]
    n = channels * height * width
    payload = stream.read(n * itemsize)
    if len(payload) != n * itemsize:
        raise SrfFormatError(
            f"truncated payload: {len(payload)} of {n * itemsize} bytes",
            _HEADER.size + len(payload),
        )
    if stream.read(1):
        raise SrfFormatError("trailing bytes after payload", _HEADER.size + n * itemsize)

    try:
        if dtype == DTYPE_C64:
            data = np.frombuffer(payload, dtype="<c8").reshape(channels, height, width)
            return ComplexRaster(data.astype(np.complex64))
        if dtype == DTYPE_F32:
            vals = np.frombuffer(payload, dtype="<f4").astype(np.float32)
            if channels == 1:
                return Plane(vals.reshape(height, width))
            return PlaneStack(vals.reshape(channels, height, width))
        labels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width).copy()
        return LabelRaster(labels)
    except ValueError as e:
        raise SrfFormatError(f"invalid payload: {e}", _HEADER.size) from e


def read_raster(path) -> Raster:
    """Read an SRF file; byte-exact inverse of write_raster."""
    with open(path, "rb") as f:
        return read_raster_stream(f)


def raster_to_bytes(r: Raster) -> bytes:
    buf = io.BytesIO()
    write_raster_stream(r, buf)
    return buf.getvalue()


def raster_from_bytes(b: bytes) -> Raster:
    return read_raster_stream(io.BytesIO(b))


# --------------------------------------------------------------------------
# Tiling
# --------------------------------------------------------------------------

def _pixels(r: Raster) -> np.ndarray:
    if isinstance(r, ComplexRaster):
        return r.data
    if isinstance(r, (Plane, PlaneStack)):
        return r.values
    return r.labels


def _like(r: Raster, pixels: np.ndarray) -> Raster:
    if isinstance(r, ComplexRaster):
        return ComplexRaster(pixels, recording_id=r.recording_id, resolution_m=r.resolution_m)
    if isinstance(r, Plane):
        return Plane(pixels)
    if isinstance(r, PlaneStack):
        return PlaneStack(pixels)
    return LabelRaster(pixels)


def tile(r: Raster, tile_size: int) -> tuple:
    """Cut `r` into non-overlapping tile_size² tiles; remainders are dropped.

    Returns (tiles, TileIndex). A tile_size exceeding both raster dims yields
    an empty tile set.
    """
    if tile_size < 1:
        raise ValueError(f"tile_size must be >= 1, got {tile_size}")
    px = _pixels(r)
    height, width = px.shape[-2], px.shape[-1]
    positions = []
    tiles = []
    for y in range(0, height - tile_size + 1, tile_size):
        for x in range(0, width - tile_size + 1, tile_size):
            window = px[..., y:y + tile_size, x:x + tile_size].copy()
            tiles.append(_like(r, window))
            positions.append((y, x))
    index = TileIndex(tile_size=tile_size, width=width, height=height, positions=tuple(positions))
    return tiles, index


def untile(tiles: Sequence[Raster], index: TileIndex) -> Raster:
    """Reassemble the covered sub-raster (the region index positions span)."""
    if len(tiles) != len(index.positions):
        raise ValueError(f"{len(tiles)} tiles for {len(index.positions)} positions")
    if not tiles:
        raise ValueError("cannot untile an empty tile set")
    ts = index.tile_size
    ny, nx = index.grid_shape
    first = _pixels(tiles[0])
    shape = first.shape[:-2] + (ny * ts, nx * ts)
    out = np.zeros(shape, dtype=first.dtype)
    for t, (y, x) in zip(tiles, index.positions):
        out[..., y:y + ts, x:x + ts] = _pixels(t)
    return _like(tiles[0], out)


# --------------------------------------------------------------------------
# Dataset split
# --------------------------------------------------------------------------

def split_dataset(tile_ids: Sequence[str], train_fraction: float, seed: int) -> tuple:
    """Deterministically split ids into (train, test); |train| = round(f*N).

    Pure function of (tile_ids, train_fraction, seed); both outputs preserve
    the input ordering.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    ids = list(tile_ids)
    n = len(ids)
    if n == 0:
        return [], []
    n_train = int(round(train_fraction * n))
    rng = np.random.Generator(np.random.Philox(key=seed))
    perm = rng.permutation(n)
    train_idx = sorted(perm[:n_train].tolist())
    test_idx = sorted(perm[n_train:].tolist())
    return [ids[i] for i in train_idx], [ids[i] for i in test_idx]
