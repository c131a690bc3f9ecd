"""
Box-free instance separation of a 3-class (background/interior/border) map.

The border class keeps touching vehicles apart: dropping it leaves interiors
that are at least two pixels from each other, so plain connected-component
labeling separates them.  One dilation step into background then gives each
object back the ring of pixels that was stripped.

Labeling works on horizontal runs rather than pixels.  Runs are found with a
row-wise diff, linked to overlapping runs on the next row, and merged with a
vectorized union-find (hook larger root under smaller, then pointer-jump).
Because runs come out of ``np.nonzero`` in row-major order, the root of every
tree is the component's first pixel in row-major order, which gives the id
ordering for free.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cityseg.errors import ValidationError
from cityseg.raster import INTERIOR, InstanceMap, as_classmap, compact_ids


@dataclass(frozen=True)
class InstancerConfig:
    connectivity: int = 8
    fill_holes: bool = True
    restrict_growth_to_semantic: bool = False
    conflict_rule: str = "min_id"
    min_component_area: int = 1

    def __post_init__(self):
        if self.connectivity not in (4, 8):
            raise ValidationError(f"connectivity must be 4 or 8, got {self.connectivity}")
        if self.conflict_rule not in ("min_id", "max_id"):
            raise ValidationError(f"conflict_rule must be min_id or max_id, got {self.conflict_rule!r}")
        if self.min_component_area < 1:
            raise ValidationError("min_component_area must be >= 1")


def strip_borders(cm: np.ndarray) -> np.ndarray:
    """Binary mask of interior pixels; border and background become 0."""
    return as_classmap(cm) == INTERIOR


# --------------------------------------------------------------------------
# run-based labeling
# --------------------------------------------------------------------------


def _find_runs(mask: np.ndarray):
    """Row, start col and exclusive end col of each horizontal run of 1s."""
    height, width = mask.shape
    padded = np.zeros((height, width + 2), dtype=np.int8)
    padded[:, 1:-1] = mask
    d = np.diff(padded, axis=1)
    del padded
    rows, starts = np.nonzero(d == 1)
    _, ends = np.nonzero(d == -1)
    return rows, starts, ends


def _run_edges(rows, starts, ends, width: int, connectivity: int):
    """Pairs (a, b) of runs on consecutive rows that touch."""
    if rows.size == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    k = 1 if connectivity == 8 else 0
    stride = width + 4
    base = rows.astype(np.int64) * stride + 2
    start_key = base + starts
    end_key = base + ends
    nxt = base + stride
    # run b (next row) touches run a iff b.end > a.start - k and b.start < a.end + k
    lo = np.searchsorted(end_key, nxt + starts - k, side="right")
    hi = np.searchsorted(start_key, nxt + ends + k, side="left")
    n = np.maximum(hi - lo, 0)
    total = int(n.sum())
    a = np.repeat(np.arange(rows.size), n)
    b = lo[a] + (np.arange(total) - np.repeat(np.cumsum(n) - n, n))
    return a, b


def _union_roots(n_runs: int, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Root (smallest member index) of every run's component."""
    parent = np.arange(n_runs)
    while a.size:
        ra, rb = parent[a], parent[b]
        differ = ra != rb
        if not differ.any():
            break
        a, b = a[differ], b[differ]
        ra, rb = ra[differ], rb[differ]
        np.minimum.at(parent, np.maximum(ra, rb), np.minimum(ra, rb))
        while True:
            jumped = parent[parent]
            if np.array_equal(jumped, parent):
                break
            parent = jumped
    return parent


def _label_runs(mask: np.ndarray, connectivity: int):
    rows, starts, ends = _find_runs(mask)
    a, b = _run_edges(rows, starts, ends, mask.shape[1], connectivity)
    roots = _union_roots(rows.size, a, b)
    _, comp = np.unique(roots, return_inverse=True)
    return rows, starts, ends, roots, comp.reshape(-1)


def _paint_runs(flat: np.ndarray, width: int, rows, starts, ends, values) -> None:
    lengths = ends - starts
    if lengths.size == 0:
        return
    first = rows.astype(np.int64) * width + starts
    offsets = np.arange(int(lengths.sum())) - np.repeat(np.cumsum(lengths) - lengths, lengths)
    flat[np.repeat(first, lengths) + offsets] = np.repeat(values, lengths)


def _fill_holes(labels: np.ndarray, mask: np.ndarray, connectivity: int) -> None:
    """Give enclosed background regions the id of the component around them.

    Background is labeled with the complementary connectivity so that every
    bounded background region is enclosed by exactly one foreground component.
    The pixel above a region's first (row-major) pixel always belongs to that
    component.
    """
    height, width = mask.shape
    rows, starts, ends, roots, comp = _label_runs(~mask, 12 - connectivity)
    if rows.size == 0:
        return
    touches = (rows == 0) | (rows == height - 1) | (starts == 0) | (ends == width)
    open_comp = np.zeros(comp.max() + 1, dtype=bool)
    open_comp[comp[touches]] = True
    hole = ~open_comp[comp]
    if not hole.any():
        return
    # a root run starts at its region's first pixel; the pixel above it is the owner
    hole_roots = roots[hole]
    owner = labels[rows[hole_roots] - 1, starts[hole_roots]]
    _paint_runs(labels.reshape(-1), width, rows[hole], starts[hole], ends[hole], owner)


def label_components(mask: np.ndarray, cfg: InstancerConfig = InstancerConfig()) -> InstanceMap:
    """Label connected components of a binary mask with ids ``1..N``.

    Ids follow row-major order of each component's first pixel.  With
    ``cfg.fill_holes`` enclosed background is absorbed into the surrounding
    component; components smaller than ``cfg.min_component_area`` are
    dropped and the remaining ids recompacted.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.size == 0:
        raise ValidationError(f"mask must be a non-empty 2-D grid, got shape {mask.shape}")
    mask = mask.astype(bool, copy=False)
    height, width = mask.shape
    labels = np.zeros((height, width), dtype=np.uint32)
    rows, starts, ends, _, comp = _label_runs(mask, cfg.connectivity)
    if rows.size == 0:
        return InstanceMap(labels, 0)
    n = int(comp.max()) + 1
    # runs are row-major, so their pixels line up with mask's True pixels
    labels.reshape(-1)[mask.reshape(-1)] = np.repeat((comp + 1).astype(np.uint32), ends - starts)
    if cfg.fill_holes:
        _fill_holes(labels, mask, cfg.connectivity)
    if cfg.min_component_area > 1:
        areas = np.bincount(labels.reshape(-1), minlength=n + 1)
        small = areas < cfg.min_component_area
        small[0] = False
        if small.any():
            labels[small[labels]] = 0
            labels, n = compact_ids(labels)
    return InstanceMap(labels, n)


def restore_borders(
    im: InstanceMap,
    cm: np.ndarray | None = None,
    cfg: InstancerConfig = InstancerConfig(),
    band: int = 1024,
) -> InstanceMap:
    """Grow every instance by one pixel into the background.

    A background pixel with at least one labeled 8-neighbour takes that id;
    when neighbours disagree ``cfg.conflict_rule`` picks the smallest or the
    largest.  Labeled pixels never change.  With
    ``cfg.restrict_growth_to_semantic`` only pixels the class map marks as
    vehicle (interior or border) may be claimed.
    """
    labels = im.labels.astype(np.uint32, copy=False)
    height, width = labels.shape
    if cm is not None:
        cm = as_classmap(cm)
        if cm.shape != labels.shape:
            raise ValidationError(f"class map shape {cm.shape} != instance map shape {labels.shape}")
    restrict = cfg.restrict_growth_to_semantic and cm is not None
    use_min = cfg.conflict_rule == "min_id"
    out = labels.copy()
    for r0 in range(0, height, band):
        r1 = min(r0 + band, height)
        lo, hi = max(r0 - 1, 0), min(r1 + 1, height)
        h = r1 - r0
        # padded row k holds global row r0 - 1 + k; the frame stays 0
        padded = np.zeros((h + 2, width + 2), dtype=np.uint32)
        padded[lo - r0 + 1 : hi - r0 + 1, 1:-1] = labels[lo:hi]
        if use_min:
            # id - 1 wraps 0 to the uint32 maximum, so background never wins a min
            padded -= np.uint32(1)
            best = np.full((h, width), np.iinfo(np.uint32).max, dtype=np.uint32)
            reduce = np.minimum
        else:
            best = np.zeros((h, width), dtype=np.uint32)
            reduce = np.maximum
        for dr in (0, 1, 2):
            for dc in (0, 1, 2):
                if dr == 1 and dc == 1:
                    continue
                reduce(best, padded[dr : dr + h, dc : dc + width], out=best)
        if use_min:
            best += np.uint32(1)
        grow = labels[r0:r1] == 0
        if restrict:
            grow &= cm[r0:r1] != 0
        out[r0:r1][grow] = best[grow]
    return InstanceMap(out, im.n_instances)


def semantic_to_instances(cm: np.ndarray, cfg: InstancerConfig = InstancerConfig()) -> InstanceMap:
    """Strip borders, label the interiors, then restore the border ring."""
    cm = as_classmap(cm)
    return restore_borders(label_components(strip_borders(cm), cfg), cm, cfg)
