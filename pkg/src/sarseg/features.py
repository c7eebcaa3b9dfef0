"""Real-valued feature planes from complex SAR recordings.

Three encodings of one complex plane: a percentile-windowed dB magnitude,
the unit phase vector (cos/sin), and the magnitude-scaled phase vector
(re/im); plus a two-channel inter-channel phase difference. A FeatureConfig
selects flights, channels, and encodings; build_feature_stack assembles the
planes in a fixed canonical order so channel indices stay stable across
saved weights.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Dict, Iterable, Sequence, Tuple

import numpy as np

from .raster import ComplexRaster, Plane, PlaneStack

# floor inside dB() so all-zero regions stay finite and deterministic
DB_EPS = 1e-12

KIND_MAGNITUDE = "magnitude"
KIND_PHASE_COS = "phase_cos"
KIND_PHASE_SIN = "phase_sin"
KIND_PHASE_RE = "phase_re"
KIND_PHASE_IM = "phase_im"
KIND_DIFF_COS = "diff_cos"
KIND_DIFF_SIN = "diff_sin"


@dataclass(frozen=True)
class FeatureConfig:
    """Selection of flights, channels, and feature encodings.

    `diff_pair` names the two recording channels whose phase difference is
    taken; they must exist in the recording (they need not be part of
    `channels`, which only selects the per-channel encodings).
    """

    flights: Tuple[int, ...] = (1, 2)
    channels: Tuple[int, ...] = (1, 2, 3, 4)
    use_magnitude: bool = True
    use_phase_cos_sin: bool = False
    use_phase_re_im: bool = False
    use_phase_diff: bool = False
    diff_pair: Tuple[int, int] = (1, 4)
    percentile: float = 0.99
    range_db: float = 25.0

    def __post_init__(self):
        object.__setattr__(self, "flights", tuple(sorted(set(self.flights))))
        object.__setattr__(self, "channels", tuple(sorted(set(self.channels))))
        if not self.flights:
            raise ValueError("at least one flight required")
        if not self.channels:
            raise ValueError("at least one channel required")
        if not (self.use_magnitude or self.use_phase_cos_sin or self.use_phase_re_im or self.use_phase_diff):
            raise ValueError("at least one feature flag must be set")
        if len(self.diff_pair) != 2:
            raise ValueError(f"diff_pair must name two channels, got {self.diff_pair}")
        if not 0.0 < self.percentile <= 1.0:
            raise ValueError(f"percentile must be in (0, 1], got {self.percentile}")
        if self.range_db <= 0:
            raise ValueError(f"range_db must be positive, got {self.range_db}")

    @property
    def planes_per_channel(self) -> int:
        return int(self.use_magnitude) + 2 * int(self.use_phase_cos_sin) + 2 * int(self.use_phase_re_im)

    def plane_count(self) -> int:
        """Closed-form stack size: |F|·|C|·(mag + 2·cossin + 2·reim) + |F|·2·diff."""
        return (len(self.flights) * len(self.channels) * self.planes_per_channel
                + len(self.flights) * 2 * int(self.use_phase_diff))


@dataclass(frozen=True)
class PlaneTag:
    """Provenance of one feature plane."""

    flight: int
    channel: object  # channel number, or (a, b) pair for phase-difference planes
    kind: str


@dataclass(frozen=True)
class FeatureStack:
    planes: Tuple[Plane, ...]
    provenance: Tuple[PlaneTag, ...]

    def __post_init__(self):
        if len(self.planes) != len(self.provenance):
            raise ValueError("one provenance tag per plane required")
        dims = {(p.height, p.width) for p in self.planes}
        if len(dims) > 1:
            raise ValueError(f"planes disagree on dimensions: {sorted(dims)}")

    def __len__(self) -> int:
        return len(self.planes)

    def as_array(self) -> np.ndarray:
        return np.stack([p.values for p in self.planes], axis=0)

    def to_plane_stack(self) -> PlaneStack:
        return PlaneStack(self.as_array())


def nearest_rank_percentile(values: np.ndarray, q: float) -> float:
    """The ⌈q·N⌉-th smallest element of the flattened sample (exact, unsampled)."""
    if not 0.0 < q <= 1.0:
        raise ValueError(f"q must be in (0, 1], got {q}")
    flat = np.sort(np.asarray(values), axis=None)
    n = flat.size
    if n == 0:
        raise ValueError("empty sample")
    rank = int(np.ceil(q * n))
    rank = min(max(rank, 1), n)
    return float(flat[rank - 1])


def magnitude_db(c: np.ndarray) -> np.ndarray:
    """20·log10(max(|z|, eps)) in float64."""
    mag = np.abs(np.asarray(c)).astype(np.float64)
    return 20.0 * np.log10(np.maximum(mag, DB_EPS))


def magnitude_db_norm(c: np.ndarray, percentile: float = 0.99, range_db: float = 25.0) -> np.ndarray:
    """dB magnitude clamped at the nearest-rank percentile, windowed to
    `range_db` below it, and mapped to [0, 1].

    An all-zero plane degenerates to all ones (the window sits at the dB
    floor) and is flagged with a warning.
    """
    c = np.asarray(c)
    if c.size == 0:
        raise ValueError("empty plane")
    db = magnitude_db(c)
    if not np.any(np.abs(c) > 0):
        warnings.warn("all-zero plane: dB window degenerates at the floor, output is all ones")
    p = nearest_rank_percentile(db, percentile)
    out = (db - (p - range_db)) / range_db
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def phase_cos_sin(c: np.ndarray) -> tuple:
    """(cos φ, sin φ) of each pixel; zero pixels map to (0, 0)."""
    c = np.asarray(c)
    mag = np.abs(c).astype(np.float64)
    nz = mag > 0
    cos = np.zeros(c.shape, dtype=np.float64)
    sin = np.zeros(c.shape, dtype=np.float64)
    cos[nz] = c.real[nz] / mag[nz]
    sin[nz] = c.imag[nz] / mag[nz]
    return cos.astype(np.float32), sin.astype(np.float32)


def phase_re_im(c: np.ndarray, percentile: float = 0.99, range_db: float = 25.0) -> tuple:
    """Windowed dB magnitude rotated by the pixel phase: (m·cos φ, m·sin φ)."""
    m = magnitude_db_norm(c, percentile, range_db).astype(np.float64)
    cos, sin = phase_cos_sin(c)
    return (m * cos.astype(np.float64)).astype(np.float32), (m * sin.astype(np.float64)).astype(np.float32)


def phase_difference(a: np.ndarray, b: np.ndarray) -> tuple:
    """(cos Δφ, sin Δφ) with Δφ = arg(a) − arg(b), via arg(a·conj(b)).

    Pixels where either input is zero map to (0, 0).
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return phase_cos_sin(a * np.conj(b))


def build_feature_stack(recordings: Dict[int, ComplexRaster], cfg: FeatureConfig) -> FeatureStack:
    """Assemble the configured feature planes from per-flight recordings.

    Canonical order: flights ascending, channels ascending, then per channel
    (magnitude, cos, sin, re, im); after all of those, per flight ascending
    the (diff_cos, diff_sin) pair. Raises on missing flights or channels.
    """
    for f in cfg.flights:
        if f not in recordings:
            raise ValueError(f"flight {f} not in recordings {sorted(recordings)}")
    shapes = {(recordings[f].height, recordings[f].width) for f in cfg.flights}
    if len(shapes) > 1:
        raise ValueError(f"recordings disagree on dimensions: {sorted(shapes)}")
    for f in cfg.flights:
        rec = recordings[f]
        for ch in cfg.channels:
            if ch > rec.channels:
                raise ValueError(f"flight {f} has {rec.channels} channels, channel {ch} requested")
        if cfg.use_phase_diff:
            for ch in cfg.diff_pair:
                if ch > rec.channels:
                    raise ValueError(f"flight {f} has {rec.channels} channels, diff channel {ch} requested")

    planes = []
    tags = []
    for f in cfg.flights:
        rec = recordings[f]
        for ch in cfg.channels:
            z = rec.channel(ch)
            if cfg.use_magnitude:
                planes.append(Plane(magnitude_db_norm(z, cfg.percentile, cfg.range_db)))
                tags.append(PlaneTag(f, ch, KIND_MAGNITUDE))
            if cfg.use_phase_cos_sin:
                cos, sin = phase_cos_sin(z)
                planes.append(Plane(cos))
                tags.append(PlaneTag(f, ch, KIND_PHASE_COS))
                planes.append(Plane(sin))
                tags.append(PlaneTag(f, ch, KIND_PHASE_SIN))
            if cfg.use_phase_re_im:
                re, im = phase_re_im(z, cfg.percentile, cfg.range_db)
                planes.append(Plane(re))
                tags.append(PlaneTag(f, ch, KIND_PHASE_RE))
                planes.append(Plane(im))
                tags.append(PlaneTag(f, ch, KIND_PHASE_IM))
    if cfg.use_phase_diff:
        for f in cfg.flights:
            rec = recordings[f]
            a, b = cfg.diff_pair
            cos, sin = phase_difference(rec.channel(a), rec.channel(b))
            planes.append(Plane(cos))
            tags.append(PlaneTag(f, cfg.diff_pair, KIND_DIFF_COS))
            planes.append(Plane(sin))
            tags.append(PlaneTag(f, cfg.diff_pair, KIND_DIFF_SIN))

    stack = FeatureStack(tuple(planes), tuple(tags))
    assert len(stack) == cfg.plane_count()
    return stack
