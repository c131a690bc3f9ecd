"""Vehicle polygons to rasters, and the 3-class training masks derived from them.

Rasterization samples each pixel at its center with the even-odd rule, so a
polygon traced along pixel edges (see :mod:`cityseg.vectorize`) rasterizes
back to exactly the pixels it came from.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cityseg.errors import ValidationError
from cityseg.raster import BORDER, INTERIOR, GeoTransform, InstanceMap, compact_ids

log = logging.getLogger(__name__)

Ring = list[tuple[float, float]]


class DegenerateFeatureWarning(UserWarning):
    pass


@dataclass
class Feature:
    """One object outline.  ``polygons`` holds one or more polygons, each a
    list of rings (exterior first, then holes) of ``(x, y)`` vertices."""

    id: int
    polygons: list[list[Ring]]
    class_label: str = "vehicle"
    properties: dict = field(default_factory=dict)

    @classmethod
    def from_rings(cls, id: int, rings: list[Ring], class_label: str = "vehicle") -> Feature:
        return cls(id, [rings], class_label)

    @property
    def rings(self) -> list[Ring]:
        return [ring for poly in self.polygons for ring in poly]

    def is_degenerate(self) -> bool:
        if not self.polygons:
            return True
        for poly in self.polygons:
            if not poly or len({(float(x), float(y)) for x, y in poly[0]}) < 3:
                return True
        return False


@dataclass
class FeatureCollection:
    features: list[Feature] = field(default_factory=list)
    geotransform: GeoTransform | None = None

    def __post_init__(self):
        seen = set()
        for f in self.features:
            if f.id in seen:
                raise ValidationError(f"duplicate feature id {f.id}")
            seen.add(f.id)

    def __len__(self):
        return len(self.features)

    def __iter__(self):
        return iter(self.features)


# --------------------------------------------------------------------------
# GeoJSON
# --------------------------------------------------------------------------


def _num(v: float):
    v = round(float(v), 9)
    if v == 0:
        return 0
    return int(v) if v.is_integer() else v


def _ring_to_json(ring: Ring) -> list:
    coords = [[_num(x), _num(y)] for x, y in ring]
    if coords and coords[0] != coords[-1]:
        coords.append(list(coords[0]))
    return coords


def feature_to_geojson(f: Feature) -> dict:
    if len(f.polygons) == 1:
        geometry = {"type": "Polygon", "coordinates": [_ring_to_json(r) for r in f.polygons[0]]}
    else:
        geometry = {
            "type": "MultiPolygon",
            "coordinates": [[_ring_to_json(r) for r in poly] for poly in f.polygons],
        }
    props = {"id": f.id, "class": f.class_label}
    props.update(f.properties)
    return {"type": "Feature", "properties": props, "geometry": geometry}


def to_geojson(fc: FeatureCollection) -> dict:
    doc = {"type": "FeatureCollection", "features": [feature_to_geojson(f) for f in fc.features]}
    if fc.geotransform is not None:
        doc["geotransform"] = fc.geotransform.to_dict()
    return doc


def from_geojson(doc: dict) -> FeatureCollection:
    """Parse Polygon/MultiPolygon features; other geometry types are ignored."""
    if doc.get("type") != "FeatureCollection":
        raise ValidationError("expected a GeoJSON FeatureCollection")
    features = []
    for i, item in enumerate(doc.get("features", [])):
        geom = item.get("geometry") or {}
        props = dict(item.get("properties") or {})
        kind = geom.get("type")
        if kind == "Polygon":
            polygons = [geom["coordinates"]]
        elif kind == "MultiPolygon":
            polygons = geom["coordinates"]
        else:
            continue
        fid = props.pop("id", item.get("id", i + 1))
        if isinstance(fid, float) and fid.is_integer():
            fid = int(fid)
        if not isinstance(fid, int) or isinstance(fid, bool) or fid < 1:
            raise ValidationError(f"feature #{i}: id must be a positive integer, got {fid!r}")
        label = props.pop("class", "vehicle")
        polys = [[[(float(p[0]), float(p[1])) for p in ring] for ring in poly] for poly in polygons]
        features.append(Feature(fid, polys, label, props))
    gt = GeoTransform.from_dict(doc["geotransform"]) if doc.get("geotransform") else None
    return FeatureCollection(features, gt)


def read_geojson(path) -> FeatureCollection:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise ValidationError(f"{path}: invalid JSON ({err})") from None
    return from_geojson(doc)


def write_geojson(path, fc: FeatureCollection) -> None:
    text = json.dumps(to_geojson(fc), separators=(",", ":"))
    Path(path).write_text(text + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# Rasterization
# --------------------------------------------------------------------------


def degenerate_features(fc: FeatureCollection) -> list[int]:
    """Ids of features whose exterior has fewer than 3 distinct vertices."""
    return [f.id for f in fc.features if f.is_degenerate()]


def _edge_crossings(rings_rc: list[np.ndarray], height: int):
    """(row, col) of every edge crossing with a pixel-center scanline.

    A scanline at ``r + 0.5`` crosses edge (a, b) when it lies in the
    half-open interval ``[min(ra, rb), max(ra, rb))``.
    """
    rows, cols = [], []
    for ring in rings_rc:
        a, b = ring[:-1], ring[1:]
        r0, c0, r1, c1 = a[:, 0], a[:, 1], b[:, 0], b[:, 1]
        lo, hi = np.minimum(r0, r1), np.maximum(r0, r1)
        first = np.maximum(np.ceil(lo - 0.5), 0).astype(np.int64)
        last = np.minimum(np.ceil(hi - 0.5) - 1, height - 1).astype(np.int64)
        n = np.maximum(last - first + 1, 0)
        n[r0 == r1] = 0
        if not n.any():
            continue
        edge = np.repeat(np.arange(len(n)), n)
        offset = np.arange(n.sum()) - np.repeat(np.cumsum(n) - n, n)
        yc = (first[edge] + offset) + 0.5
        t = (yc - r0[edge]) / (r1[edge] - r0[edge])
        rows.append(first[edge] + offset)
        cols.append(c0[edge] + t * (c1[edge] - c0[edge]))
    if not rows:
        return np.empty(0, np.int64), np.empty(0)
    return np.concatenate(rows), np.concatenate(cols)


def _fill_feature(out: np.ndarray, value: int, rings_rc: list[np.ndarray]) -> None:
    height, width = out.shape
    rows, cols = _edge_crossings(rings_rc, height)
    if rows.size == 0:
        return
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    # even-odd: consecutive crossings on a scanline bound the inside spans
    starts = np.ceil(cols[0::2] - 0.5).astype(np.int64)
    stops = np.ceil(cols[1::2] - 0.5).astype(np.int64)
    span_rows = rows[0::2]
    if not np.array_equal(span_rows, rows[1::2]):
        raise ValidationError("odd number of crossings on a scanline; ring not closed")
    starts = np.clip(starts, 0, width)
    stops = np.clip(stops, 0, width)
    for r, c0, c1 in zip(span_rows.tolist(), starts.tolist(), stops.tolist()):
        if c1 > c0:
            out[r, c0:c1] = value


def _rings_to_pixel_space(f: Feature, gt: GeoTransform) -> list[np.ndarray]:
    rings = []
    for ring in f.rings:
        pts = np.asarray(ring, dtype=float).reshape(-1, 2)
        if len(pts) < 2:
            continue
        if not np.array_equal(pts[0], pts[-1]):
            pts = np.vstack([pts, pts[:1]])
        r, c = gt.world_to_fractional(pts[:, 0], pts[:, 1])
        rings.append(np.column_stack([r, c]))
    return rings


def rasterize_features(fc: FeatureCollection, gt: GeoTransform, width: int, height: int) -> InstanceMap:
    """Paint features into an instance map.

    A pixel belongs to a feature when its center is inside the feature under
    the even-odd rule.  Features are painted in ascending id order so the
    higher id wins on overlap; ids are then compacted to ``1..N`` in
    row-major order of first appearance.  Degenerate features are skipped
    with a :class:`DegenerateFeatureWarning` (see :func:`degenerate_features`).
    """
    if width < 1 or height < 1:
        raise ValidationError(f"raster size must be positive, got {width}x{height}")
    out = np.zeros((height, width), dtype=np.uint32)
    for f in sorted(fc.features, key=lambda f: f.id):
        if f.is_degenerate():
            warnings.warn(f"feature {f.id}: degenerate exterior ring, skipped", DegenerateFeatureWarning, stacklevel=2)
            continue
        _fill_feature(out, f.id, _rings_to_pixel_space(f, gt))
    labels, n = compact_ids(out)
    return InstanceMap(labels, n)


# --------------------------------------------------------------------------
# 3-class masks
# --------------------------------------------------------------------------

_NEIGHBORS = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if (dr, dc) != (0, 0)]


def _interior_band(padded: np.ndarray) -> np.ndarray:
    """Interior test for the center rows of a band padded by one pixel."""
    h, w = padded.shape[0] - 2, padded.shape[1] - 2
    center = padded[1:-1, 1:-1]
    inside = center != 0
    for dr, dc in _NEIGHBORS:
        inside &= padded[1 + dr : 1 + dr + h, 1 + dc : 1 + dc + w] == center
    return inside


def derive_three_class(im: InstanceMap, band: int = 2048) -> np.ndarray:
    """Split every instance into a 1-pixel border ring and its interior.

    A pixel is interior when it and all 8 neighbours carry the same id (the
    image edge counts as background), i.e. per-id erosion by a full 3x3
    element.  Touching instances therefore both get a border along their
    contact line.
    """
    labels = im.labels
    height, width = labels.shape
    cm = np.zeros((height, width), dtype=np.uint8)
    cm[labels != 0] = BORDER
    for r0 in range(0, height, band):
        r1 = min(r0 + band, height)
        lo, hi = max(r0 - 1, 0), min(r1 + 1, height)
        chunk = np.zeros((r1 - r0 + 2, width + 2), dtype=labels.dtype)
        # chunk row k holds global row r0 - 1 + k
        chunk[lo - r0 + 1 : hi - r0 + 1, 1:-1] = labels[lo:hi]
        cm[r0:r1][_interior_band(chunk)] = INTERIOR
    thin = count_thin_objects(im, cm)
    if thin:
        log.info("%d instance(s) too thin for an interior", thin)
    return cm


def count_thin_objects(im: InstanceMap, cm: np.ndarray) -> int:
    """Instances that have no interior pixel after erosion."""
    with_interior = np.unique(im.labels[cm == INTERIOR])
    return im.n_instances - int(np.count_nonzero(with_interior))


def rectangle_feature(fid: int, row0: float, col0: float, h: float, w: float, gt: GeoTransform) -> Feature:
    """Axis-aligned rectangle covering pixels ``[row0, row0+h) x [col0, col0+w)``."""
    corners = [(row0, col0), (row0 + h, col0), (row0 + h, col0 + w), (row0, col0 + w), (row0, col0)]
    xs, ys = gt.corner_to_world([c[0] for c in corners], [c[1] for c in corners])
    ring = list(zip(xs.tolist(), ys.tolist()))
    if _signed_area(ring) < 0:
        ring.reverse()
    return Feature.from_rings(fid, [ring])


def _signed_area(ring: Ring) -> float:
    pts = np.asarray(ring, dtype=float)
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.dot(x[:-1], y[1:]) - np.dot(x[1:], y[:-1]))


def ellipse_polygon(fid: int, cy: float, cx: float, ry: float, rx: float, gt: GeoTransform, n: int = 32) -> Feature:
    t = np.linspace(0, 2 * math.pi, n, endpoint=False)
    rows, cols = cy + ry * np.sin(t), cx + rx * np.cos(t)
    xs, ys = gt.corner_to_world(rows, cols)
    ring = list(zip(xs.tolist(), ys.tolist()))
    ring.append(ring[0])
    if _signed_area(ring) < 0:
        ring.reverse()
    return Feature.from_rings(fid, [ring])
