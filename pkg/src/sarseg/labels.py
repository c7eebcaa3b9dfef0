"""Vector annotations, rasterization, and dual-source label fusion.

Buildings come as polygons (with optional holes) from two independent
sources; a pixel is labeled building only where both sources agree, and
unlabeled where exactly one claims it. Roads come as ranked centerlines;
each rank maps to a (min_width, max_width) pair: pixels within the min
band are road, pixels between min and max band are unlabeled.

Rasterization uses pixel-center sampling: pixel (row y, col x) is sampled
at (x + 0.5, y + 0.5), with an even-odd scanline fill for polygons and
Euclidean distance to segments (round caps/joins) for road bands.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .raster import LABEL_BUILDING, LABEL_OTHER, LABEL_ROAD, LABEL_UNLABELED, LabelRaster

TRI_NO = 0
TRI_YES = 1
TRI_UNLABELED = 2

SOURCE_OSM = "osm"
SOURCE_SWISSTOPO = "swisstopo"
VALID_SOURCES = (SOURCE_OSM, SOURCE_SWISSTOPO)

# ranks retained by the main-roads variant
MAIN_ROAD_RANKS = frozenset({"primary", "secondary", "tertiary", "residential", "living_street"})


class AnnotationError(ValueError):
    pass


class RoadVariant(enum.Enum):
    MAIN_ROADS_OSM = "main-osm"
    ALL_ROADS_OSM = "all-osm"
    OSM_AND_SWISSTOPO_AGREE = "agree"


def normalize_rank(rank: str) -> str:
    return rank.strip().lower().replace(" ", "_")


@dataclass(frozen=True)
class BuildingPolygon:
    """Outer ring plus optional hole rings, pixel coordinates, open form."""

    rings: Tuple[np.ndarray, ...]  # each (k, 2) float64, k >= 3, no closing duplicate

    def __post_init__(self):
        if not self.rings:
            raise AnnotationError("polygon has no rings")
        for ring in self.rings:
            if ring.ndim != 2 or ring.shape[1] != 2 or ring.shape[0] < 3:
                raise AnnotationError(f"polygon ring needs >= 3 vertices, got shape {ring.shape}")


@dataclass(frozen=True)
class RoadLine:
    points: np.ndarray  # (k, 2) float64, k >= 2
    rank: str

    def __post_init__(self):
        if self.points.ndim != 2 or self.points.shape[1] != 2 or self.points.shape[0] < 2:
            raise AnnotationError(f"polyline needs >= 2 vertices, got shape {self.points.shape}")
        if not self.rank:
            raise AnnotationError("road rank must be non-empty")


@dataclass(frozen=True)
class AnnotationSet:
    source: str
    buildings: Tuple[BuildingPolygon, ...] = ()
    roads: Tuple[RoadLine, ...] = ()

    def __post_init__(self):
        if self.source not in VALID_SOURCES:
            raise AnnotationError(f"source must be one of {VALID_SOURCES}, got {self.source!r}")


@dataclass(frozen=True)
class RoadWidthTable:
    """Per-rank (min_width_m, max_width_m) plus optional fallback, and the
    meters-per-pixel scale used to convert widths to pixel radii."""

    widths_m: Dict[str, Tuple[float, float]]
    resolution_m: float
    fallback_m: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        for rank, (lo, hi) in self.widths_m.items():
            if not 0 < lo <= hi:
                raise ValueError(f"rank {rank!r}: need 0 < min <= max, got ({lo}, {hi})")
        if self.fallback_m is not None:
            lo, hi = self.fallback_m
            if not 0 < lo <= hi:
                raise ValueError(f"fallback: need 0 < min <= max, got ({lo}, {hi})")
        if self.resolution_m <= 0:
            raise ValueError(f"resolution_m must be positive, got {self.resolution_m}")

    def radii_px(self, rank: str) -> Tuple[float, float]:
        """(min, max) band radii in pixels for `rank`; KeyError-style failure
        lists the rank when it is absent and no fallback exists."""
        key = normalize_rank(rank)
        widths = self.widths_m.get(key, self.fallback_m)
        if widths is None:
            raise ValueError(f"rank {key!r} missing from width table and no fallback configured")
        lo, hi = widths
        return lo / (2.0 * self.resolution_m), hi / (2.0 * self.resolution_m)


DEFAULT_WIDTHS_M: Dict[str, Tuple[float, float]] = {
    "primary": (6.0, 12.0),
    "secondary": (5.0, 10.0),
    "tertiary": (4.0, 9.0),
    "residential": (4.0, 8.0),
    "living_street": (3.0, 7.0),
    "service": (2.5, 6.0),
    "track": (2.0, 5.0),
    "cycleway": (1.5, 4.0),
    "footway": (1.5, 4.0),
    "path": (1.2, 4.0),
    "pedestrian": (3.0, 8.0),
    "unclassified": (3.0, 8.0),
}
DEFAULT_FALLBACK_M = (2.0, 5.0)


def default_width_table(resolution_m: float = 0.15) -> RoadWidthTable:
    return RoadWidthTable(dict(DEFAULT_WIDTHS_M), resolution_m, DEFAULT_FALLBACK_M)


def parse_width_table(text: str, resolution_m: float = 0.15) -> RoadWidthTable:
    """Parse `rank = min_m, max_m` lines; `default = min, max` sets the fallback."""
    widths = {}
    fallback = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"width table line {lineno}: expected 'rank = min, max', got {raw!r}")
        rank, _, rhs = line.partition("=")
        parts = [p.strip() for p in rhs.split(",")]
        if len(parts) != 2:
            raise ValueError(f"width table line {lineno}: expected two widths, got {rhs!r}")
        try:
            pair = (float(parts[0]), float(parts[1]))
        except ValueError as e:
            raise ValueError(f"width table line {lineno}: {e}") from e
        key = normalize_rank(rank)
        if key == "default":
            fallback = pair
        else:
            widths[key] = pair
    return RoadWidthTable(widths, resolution_m, fallback)


# --------------------------------------------------------------------------
# GeoJSON parsing
# --------------------------------------------------------------------------

def _parse_ring(ring, feature_idx: int) -> np.ndarray:
    pts = np.asarray(ring, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise AnnotationError(f"feature {feature_idx}: ring is not a coordinate list")
    if pts.shape[0] >= 2 and np.array_equal(pts[0], pts[-1]):
        pts = pts[:-1]  # drop GeoJSON closing duplicate
    if pts.shape[0] < 3:
        raise AnnotationError(f"feature {feature_idx}: polygon ring has {pts.shape[0]} vertices, need >= 3")
    return pts


def parse_annotations(doc: dict, source: Optional[str] = None) -> AnnotationSet:
    """Parse a GeoJSON FeatureCollection into an AnnotationSet.

    Every feature needs properties {source, kind[, rank]}; buildings are
    Polygons, roads are LineStrings, anything else is rejected with the
    feature index. `source` pins the expected source tag and resolves it
    for empty collections.
    """
    if doc.get("type") != "FeatureCollection":
        raise AnnotationError(f"expected FeatureCollection, got {doc.get('type')!r}")
    buildings = []
    roads = []
    seen_source = source
    for i, feat in enumerate(doc.get("features", [])):
        props = feat.get("properties") or {}
        fsrc = props.get("source")
        if fsrc not in VALID_SOURCES:
            raise AnnotationError(f"feature {i}: bad source {fsrc!r}")
        if seen_source is None:
            seen_source = fsrc
        elif fsrc != seen_source:
            raise AnnotationError(f"feature {i}: source {fsrc!r} differs from {seen_source!r}")
        kind = props.get("kind")
        geom = feat.get("geometry") or {}
        gtype = geom.get("type")
        coords = geom.get("coordinates")
        if kind == "building":
            if gtype != "Polygon":
                raise AnnotationError(f"feature {i}: building must be a Polygon, got {gtype!r}")
            if not coords:
                raise AnnotationError(f"feature {i}: empty polygon")
            rings = tuple(_parse_ring(r, i) for r in coords)
            buildings.append(BuildingPolygon(rings))
        elif kind == "road":
            if gtype != "LineString":
                raise AnnotationError(f"feature {i}: road must be a LineString, got {gtype!r}")
            rank = props.get("rank")
            if not rank:
                raise AnnotationError(f"feature {i}: road missing 'rank'")
            pts = np.asarray(coords, dtype=np.float64)
            if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
                raise AnnotationError(f"feature {i}: polyline needs >= 2 vertices")
            roads.append(RoadLine(pts, normalize_rank(str(rank))))
        else:
            raise AnnotationError(f"feature {i}: unknown kind {kind!r}")
    if seen_source is None:
        raise AnnotationError("empty collection and no source given")
    return AnnotationSet(seen_source, tuple(buildings), tuple(roads))


def load_annotations(path, source: Optional[str] = None) -> AnnotationSet:
    with open(path, "r", encoding="utf-8") as f:
        return parse_annotations(json.load(f), source)


def annotations_to_geojson(aset: AnnotationSet) -> dict:
    """Inverse of parse_annotations (rings re-closed per GeoJSON convention)."""
    features = []
    for b in aset.buildings:
        rings = [np.vstack([r, r[:1]]).tolist() for r in b.rings]
        features.append({
            "type": "Feature",
            "properties": {"source": aset.source, "kind": "building"},
            "geometry": {"type": "Polygon", "coordinates": rings},
        })
    for r in aset.roads:
        features.append({
            "type": "Feature",
            "properties": {"source": aset.source, "kind": "road", "rank": r.rank},
            "geometry": {"type": "LineString", "coordinates": r.points.tolist()},
        })
    return {"type": "FeatureCollection", "features": features}


# --------------------------------------------------------------------------
# Polygon fill
# --------------------------------------------------------------------------

def point_in_rings(x: float, y: float, rings: Sequence[np.ndarray]) -> bool:
    """Even-odd ray-cast over all rings (holes flip parity naturally)."""
    inside = False
    for ring in rings:
        x1 = ring[:, 0]
        y1 = ring[:, 1]
        x2 = np.roll(x1, -1)
        y2 = np.roll(y1, -1)
        crosses = ((y1 <= y) & (y < y2)) | ((y2 <= y) & (y < y1))
        if not crosses.any():
            continue
        xi = x1[crosses] + (y - y1[crosses]) * (x2[crosses] - x1[crosses]) / (y2[crosses] - y1[crosses])
        inside ^= bool(np.count_nonzero(xi > x) % 2)
    return inside


def fill_polygon_mask(polygon: BuildingPolygon, grid: Tuple[int, int]) -> np.ndarray:
    """Boolean mask of pixel centers inside the polygon (even-odd fill)."""
    height, width = grid
    mask = np.zeros((height, width), dtype=bool)
    edges = []
    for ring in polygon.rings:
        p1 = ring
        p2 = np.roll(ring, -1, axis=0)
        edges.append(np.hstack([p1, p2]))
    e = np.vstack(edges)  # (n, 4): x1, y1, x2, y2
    nonflat = e[:, 1] != e[:, 3]
    e = e[nonflat]
    if e.size == 0:
        return mask
    ymin = max(int(np.floor(e[:, [1, 3]].min() - 0.5)), 0)
    ymax = min(int(np.ceil(e[:, [1, 3]].max() - 0.5)), height - 1)
    for row in range(ymin, ymax + 1):
        yc = row + 0.5
        lo = np.minimum(e[:, 1], e[:, 3])
        hi = np.maximum(e[:, 1], e[:, 3])
        hit = (lo <= yc) & (yc < hi)
        if not hit.any():
            continue
        seg = e[hit]
        xs = seg[:, 0] + (yc - seg[:, 1]) * (seg[:, 2] - seg[:, 0]) / (seg[:, 3] - seg[:, 1])
        xs.sort()
        for xa, xb in zip(xs[0::2], xs[1::2]):
            # pixel centers x+0.5 in [xa, xb)
            first = int(np.ceil(xa - 0.5))
            last = int(np.ceil(xb - 0.5)) - 1
            if last < 0 or first > width - 1:
                continue
            mask[row, max(first, 0):min(last, width - 1) + 1] = True
    return mask


def fill_buildings_mask(aset: AnnotationSet, grid: Tuple[int, int]) -> np.ndarray:
    """Union fill of all building polygons of one source."""
    mask = np.zeros(grid, dtype=bool)
    for poly in aset.buildings:
        mask |= fill_polygon_mask(poly, grid)
    return mask


def rasterize_buildings(src_a: AnnotationSet, src_b: AnnotationSet, grid: Tuple[int, int]) -> np.ndarray:
    """Tri-state building plane: yes where both sources agree, unlabeled where
    exactly one claims the pixel, no elsewhere. Symmetric in (src_a, src_b)."""
    a = fill_buildings_mask(src_a, grid)
    b = fill_buildings_mask(src_b, grid)
    out = np.full(grid, TRI_NO, dtype=np.uint8)
    out[a & b] = TRI_YES
    out[a ^ b] = TRI_UNLABELED
    return out


# --------------------------------------------------------------------------
# Road bands
# --------------------------------------------------------------------------

def _stamp_bands(min_mask: np.ndarray, max_mask: np.ndarray, road: RoadLine,
                 rmin: float, rmax: float) -> None:
    """OR the road's min/max distance bands into the masks (in place)."""
    height, width = min_mask.shape
    for p1, p2 in zip(road.points[:-1], road.points[1:]):
        x_lo = max(int(np.floor(min(p1[0], p2[0]) - rmax - 0.5)), 0)
        x_hi = min(int(np.ceil(max(p1[0], p2[0]) + rmax - 0.5)), width - 1)
        y_lo = max(int(np.floor(min(p1[1], p2[1]) - rmax - 0.5)), 0)
        y_hi = min(int(np.ceil(max(p1[1], p2[1]) + rmax - 0.5)), height - 1)
        if x_hi < x_lo or y_hi < y_lo:
            continue
        cx = np.arange(x_lo, x_hi + 1, dtype=np.float64) + 0.5
        cy = np.arange(y_lo, y_hi + 1, dtype=np.float64) + 0.5
        dx = p2[0] - p1[0]
        dy = p2[1] - p1[1]
        len2 = dx * dx + dy * dy
        px = cx[None, :] - p1[0]
        py = cy[:, None] - p1[1]
        if len2 > 0:
            t = np.clip((px * dx + py * dy) / len2, 0.0, 1.0)
        else:
            t = 0.0
        ex = px - t * dx
        ey = py - t * dy
        d2 = ex * ex + ey * ey
        min_mask[y_lo:y_hi + 1, x_lo:x_hi + 1] |= d2 <= rmin * rmin
        max_mask[y_lo:y_hi + 1, x_lo:x_hi + 1] |= d2 <= rmax * rmax


def road_band_masks(roads: Sequence[RoadLine], grid: Tuple[int, int],
                    widths: RoadWidthTable) -> tuple:
    """(min_band, max_band) boolean masks over all given roads."""
    min_mask = np.zeros(grid, dtype=bool)
    max_mask = np.zeros(grid, dtype=bool)
    for road in roads:
        rmin, rmax = widths.radii_px(road.rank)
        _stamp_bands(min_mask, max_mask, road, rmin, rmax)
    return min_mask, max_mask


def _retained(aset: AnnotationSet, variant: RoadVariant) -> Sequence[RoadLine]:
    if variant is RoadVariant.MAIN_ROADS_OSM:
        return [r for r in aset.roads if r.rank in MAIN_ROAD_RANKS]
    return list(aset.roads)


def rasterize_roads(sets: Sequence[AnnotationSet], grid: Tuple[int, int],
                    widths: RoadWidthTable, variant: RoadVariant) -> np.ndarray:
    """Tri-state road plane per the selected annotation variant.

    Single-source variants: pixels within a retained road's min band are
    road, within its max band (only) unlabeled, else not-road. The agree
    variant marks road only where both sources' min bands overlap; any
    solitary min band or either max band becomes unlabeled.
    """
    by_source = {s.source: s for s in sets}
    out = np.full(grid, TRI_NO, dtype=np.uint8)
    if variant is RoadVariant.OSM_AND_SWISSTOPO_AGREE:
        if SOURCE_OSM not in by_source or SOURCE_SWISSTOPO not in by_source:
            raise ValueError("agree variant needs both osm and swisstopo sets")
        min_a, max_a = road_band_masks(_retained(by_source[SOURCE_OSM], variant), grid, widths)
        min_b, max_b = road_band_masks(_retained(by_source[SOURCE_SWISSTOPO], variant), grid, widths)
        road = min_a & min_b
        fuzzy = (min_a | min_b | max_a | max_b) & ~road
    else:
        if SOURCE_OSM not in by_source:
            raise ValueError(f"variant {variant.value} needs the osm set")
        min_m, max_m = road_band_masks(_retained(by_source[SOURCE_OSM], variant), grid, widths)
        road = min_m
        fuzzy = max_m & ~min_m
    out[fuzzy] = TRI_UNLABELED
    out[road] = TRI_YES
    return out


# --------------------------------------------------------------------------
# Fusion
# --------------------------------------------------------------------------

def fuse_labels(buildings: np.ndarray, roads: np.ndarray) -> LabelRaster:
    """Combine tri-state building and road planes into a LabelRaster.

    Precedence: building-yes > building-unlabeled > road-yes >
    road-unlabeled > other.
    """
    if buildings.shape != roads.shape:
        raise ValueError(f"dimension mismatch: {buildings.shape} vs {roads.shape}")
    out = np.full(buildings.shape, LABEL_OTHER, dtype=np.uint8)
    out[roads == TRI_UNLABELED] = LABEL_UNLABELED
    out[roads == TRI_YES] = LABEL_ROAD
    out[buildings == TRI_UNLABELED] = LABEL_UNLABELED
    out[buildings == TRI_YES] = LABEL_BUILDING
    return LabelRaster(out)
