"""Instance maps to polygons and back.

Outlines run along pixel edges, so every vertex sits on the pixel-corner
lattice and rasterizing the traced polygon at pixel centers recovers the
exact pixel set.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from cityseg.groundtruth import Feature, FeatureCollection, rasterize_features
from cityseg.raster import GeoTransform, InstanceMap

# direction codes, clockwise on screen (rows grow downward)
_E, _S, _W, _N = 0, 1, 2, 3
_STEP = {_E: (0, 1), _S: (1, 0), _W: (0, -1), _N: (-1, 0)}


def _boundary_edges(mask: np.ndarray):
    """Unit boundary edges of a padded mask, oriented with the object on
    the right-hand side (clockwise around each pixel on screen)."""
    m = mask
    r, c = np.nonzero(m[1:-1, 1:-1])
    r, c = r + 1, c + 1
    edges = []
    for direction, (dr, dc), start in (
        (_E, (-1, 0), (0, 0)),
        (_S, (0, 1), (0, 1)),
        (_W, (1, 0), (1, 1)),
        (_N, (0, -1), (1, 0)),
    ):
        sel = ~m[r + dr, c + dc]
        edges.append((direction, r[sel] + start[0], c[sel] + start[1]))
    return edges


def _link_rings(mask: np.ndarray) -> list[list[tuple[int, int]]]:
    outgoing: dict[tuple[int, int], list[int]] = {}
    dirs: list[int] = []
    starts: list[tuple[int, int]] = []
    for direction, rows, cols in _boundary_edges(mask):
        for rr, cc in zip(rows.tolist(), cols.tolist()):
            outgoing.setdefault((rr, cc), []).append(len(dirs))
            dirs.append(direction)
            starts.append((rr, cc))
    used = [False] * len(dirs)
    rings = []
    for first in range(len(dirs)):
        if used[first]:
            continue
        ring = [starts[first]]
        e = first
        while True:
            used[e] = True
            d = dirs[e]
            pr, pc = starts[e]
            dr, dc = _STEP[d]
            end = (pr + dr, pc + dc)
            if end == starts[first]:
                break
            ring.append(end)
            # prefer the tightest right turn so diagonal-only contacts split
            options = [x for x in outgoing[end] if not used[x]]
            by_dir = {dirs[x]: x for x in options}
            e = next(by_dir[t] for t in ((d + 1) % 4, d, (d + 3) % 4) if t in by_dir)
        ring.append(ring[0])
        rings.append(_drop_collinear(ring))
    return rings


def _drop_collinear(ring):
    pts = ring[:-1]
    n = len(pts)
    keep = []
    for i in range(n):
        (r0, c0), (r1, c1), (r2, c2) = pts[i - 1], pts[i], pts[(i + 1) % n]
        if (r1 - r0) * (c2 - c1) != (c1 - c0) * (r2 - r1):
            keep.append(pts[i])
    keep.append(keep[0])
    return keep


def _ring_area(ring) -> float:
    """Shoelace area with x = col, y = row (exteriors come out positive)."""
    a = np.asarray(ring, dtype=float)
    y, x = a[:, 0], a[:, 1]
    return 0.5 * float(np.dot(x[:-1], y[1:]) - np.dot(x[1:], y[:-1]))


def _inside(point, ring) -> bool:
    pr, pc = point
    inside = False
    for (r0, c0), (r1, c1) in zip(ring[:-1], ring[1:]):
        if c0 == c1 and c0 > pc and min(r0, r1) < pr < max(r0, r1):
            inside = not inside
    return inside


def _probe(hole) -> tuple[float, float]:
    """A point on one of the hole's vertical edges, off every lattice row."""
    for (r0, c0), (r1, c1) in zip(hole[:-1], hole[1:]):
        if c0 == c1:
            return r0 + (0.5 if r1 > r0 else -0.5), c0
    raise AssertionError("closed lattice ring without a vertical edge")


def trace_mask(mask: np.ndarray) -> list[list[list[tuple[int, int]]]]:
    """Polygons outlining a binary mask, in pixel-corner ``(row, col)``
    coordinates: a list of ``[exterior, hole, ...]`` ring lists."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1)
    rings = [[(r - 1, c - 1) for r, c in ring] for ring in _link_rings(padded)]
    exteriors = [r for r in rings if _ring_area(r) > 0]
    holes = [r for r in rings if _ring_area(r) < 0]
    polygons = [[ext] for ext in exteriors]
    if len(exteriors) == 1:
        polygons[0].extend(holes)
        return polygons
    areas = [_ring_area(e) for e in exteriors]
    for hole in holes:
        probe = _probe(hole)
        owners = [i for i, ext in enumerate(exteriors) if _inside(probe, ext)]
        polygons[min(owners, key=areas.__getitem__)].append(hole)
    return polygons


def _to_world(ring, gt: GeoTransform, row0: int, col0: int, exterior: bool):
    a = np.asarray(ring, dtype=float)
    xs, ys = gt.corner_to_world(a[:, 0] + row0, a[:, 1] + col0)
    pts = list(zip(xs.tolist(), ys.tolist()))
    area = 0.5 * float(np.dot(xs[:-1], ys[1:]) - np.dot(xs[1:], ys[:-1]))
    # counterclockwise exteriors, clockwise holes
    if (area < 0) == exterior:
        pts.reverse()
    return pts


def instances_to_features(im: InstanceMap, gt: GeoTransform) -> FeatureCollection:
    """One polygon feature per instance id, with ``area_px`` and ``area_m2``."""
    features = []
    labels = im.labels
    for idx, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None:
            continue
        mask = labels[sl] == idx
        area_px = int(mask.sum())
        row0, col0 = sl[0].start, sl[1].start
        polygons = [
            [_to_world(ring, gt, row0, col0, exterior=(k == 0)) for k, ring in enumerate(poly)]
            for poly in trace_mask(mask)
        ]
        props = {"area_px": area_px, "area_m2": area_px * gt.pixel_area}
        features.append(Feature(idx, polygons, "vehicle", props))
    return FeatureCollection(features, gt)


def features_to_instances(fc: FeatureCollection, gt: GeoTransform, width: int, height: int) -> InstanceMap:
    return rasterize_features(fc, gt, width, height)
