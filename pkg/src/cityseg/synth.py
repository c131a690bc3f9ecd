"""Deterministic synthetic vehicle scenes for tests and desk-scale runs."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cityseg.errors import ValidationError
from cityseg.groundtruth import FeatureCollection
from cityseg.raster import GeoTransform, InstanceMap, compact_ids
from cityseg.vectorize import instances_to_features

PRESETS = ("grid", "parking-lot", "touching-pairs")


@dataclass
class SceneSpec:
    """Scene description.

    Shapes are dicts: ``{"type": "rect", "row", "col", "h", "w"}`` (top-left
    pixel and size) or ``{"type": "ellipse", "row", "col", "ry", "rx"}``
    (center and radii, in pixels).
    """

    width: int
    height: int
    shapes: list[dict] = field(default_factory=list)
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> SceneSpec:
        try:
            return cls(int(d["width"]), int(d["height"]), list(d.get("shapes", [])), int(d.get("seed", 0)))
        except KeyError as err:
            raise ValidationError(f"scene spec missing field {err}") from None

    @classmethod
    def load(cls, path) -> SceneSpec:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        return {"width": self.width, "height": self.height, "seed": self.seed, "shapes": self.shapes}


def _shape_mask(shape: dict, height: int, width: int, index: int):
    kind = shape.get("type", "rect")
    if kind == "rect":
        r, c, h, w = (int(shape[k]) for k in ("row", "col", "h", "w"))
        if h < 1 or w < 1 or r < 0 or c < 0 or r + h > height or c + w > width:
            raise ValidationError(f"shape {index}: rectangle {r},{c} {h}x{w} outside {height}x{width} scene")
        return (slice(r, r + h), slice(c, c + w)), np.ones((h, w), dtype=bool)
    if kind == "ellipse":
        cy, cx, ry, rx = (float(shape[k]) for k in ("row", "col", "ry", "rx"))
        if ry <= 0 or rx <= 0 or cy - ry < 0 or cx - rx < 0 or cy + ry > height or cx + rx > width:
            raise ValidationError(f"shape {index}: ellipse outside {height}x{width} scene")
        r0, r1 = int(np.floor(cy - ry)), int(np.ceil(cy + ry))
        c0, c1 = int(np.floor(cx - rx)), int(np.ceil(cx + rx))
        rr = np.arange(r0, r1)[:, None] + 0.5
        cc = np.arange(c0, c1)[None, :] + 0.5
        inside = ((rr - cy) / ry) ** 2 + ((cc - cx) / rx) ** 2 <= 1.0
        return (slice(r0, r1), slice(c0, c1)), inside
    raise ValidationError(f"shape {index}: unknown type {kind!r}")


def synthesize_scene(spec: SceneSpec, gt: GeoTransform | None = None) -> tuple[InstanceMap, FeatureCollection]:
    """Rasterize the described shapes and trace matching vector ground truth.

    Shapes must be pairwise disjoint; touching along an edge is fine.
    """
    if spec.width < 1 or spec.height < 1:
        raise ValidationError("scene dimensions must be positive")
    gt = gt or GeoTransform()
    labels = np.zeros((spec.height, spec.width), dtype=np.uint32)
    for i, shape in enumerate(spec.shapes):
        sl, inside = _shape_mask(shape, spec.height, spec.width, i)
        window = labels[sl]
        clash = window[inside]
        if clash.any():
            raise ValidationError(f"shape {i} overlaps shape {int(clash[clash != 0][0]) - 1}")
        window[inside] = i + 1
    labels, n = compact_ids(labels)
    im = InstanceMap(labels, n)
    return im, instances_to_features(im, gt)


# --------------------------------------------------------------------------
# presets
# --------------------------------------------------------------------------


def grid_scene(seed: int = 0, rows: int = 10, cols: int = 10) -> SceneSpec:
    """Separated 20x10 vehicles, one per 40x30 cell, jittered by ``seed``."""
    rng = np.random.default_rng(seed)
    shapes = []
    for i in range(rows):
        for j in range(cols):
            dr, dc = rng.integers(0, 11), rng.integers(0, 11)
            shapes.append({"type": "rect", "row": i * 30 + 5 + int(dr) // 2, "col": j * 40 + 5 + int(dc), "h": 10, "w": 20})
    return SceneSpec(cols * 40, rows * 30, shapes, seed)


def parking_lot_scene(seed: int = 0, bays: int = 5, per_row: int = 10) -> SceneSpec:
    """``bays`` double rows of nose-to-nose parked cars, every car touching
    its neighbours on both long sides and its counterpart at the nose."""
    rng = np.random.default_rng(seed)
    shapes = []
    row = 6
    for _ in range(bays):
        col = 6
        for _ in range(per_row):
            w = int(rng.integers(9, 12))
            top_len, bottom_len = (int(v) for v in rng.integers(18, 23, size=2))
            shapes.append({"type": "rect", "row": row + 22 - top_len, "col": col, "h": top_len, "w": w})
            shapes.append({"type": "rect", "row": row + 22, "col": col, "h": bottom_len, "w": w})
            col += w
        row += 44 + 12
    width = 6 + per_row * 11 + 6
    return SceneSpec(width, row, shapes, seed)


def touching_pairs_scene(seed: int = 0, n_pairs: int = 20) -> SceneSpec:
    """Pairs of rectangles sharing an edge, horizontally or vertically."""
    rng = np.random.default_rng(seed)
    shapes = []
    cols = 5
    for k in range(n_pairs):
        r0, c0 = (k // cols) * 50 + 4, (k % cols) * 50 + 4
        h, w = (int(v) for v in rng.integers(3, 21, size=2))
        h2, w2 = (int(v) for v in rng.integers(3, 21, size=2))
        shapes.append({"type": "rect", "row": r0, "col": c0, "h": h, "w": w})
        if rng.random() < 0.5:
            shapes.append({"type": "rect", "row": r0, "col": c0 + w, "h": h2, "w": min(w2, 42 - w)})
        else:
            shapes.append({"type": "rect", "row": r0 + h, "col": c0, "h": min(h2, 42 - h), "w": w2})
    return SceneSpec(cols * 50, -(-n_pairs // cols) * 50, shapes, seed)


def preset_scene(name: str, seed: int = 0) -> SceneSpec:
    if name == "grid":
        return grid_scene(seed)
    if name == "parking-lot":
        return parking_lot_scene(seed)
    if name == "touching-pairs":
        return touching_pairs_scene(seed)
    raise ValidationError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")


def random_rectangles(
    seed: int, width: int = 96, height: int = 96, n: int = 12, min_dim: int = 3, max_dim: int = 24, pair_prob: float = 0.4
) -> SceneSpec:
    """Random disjoint rectangles; with probability ``pair_prob`` each one
    also gets an edge-sharing partner."""
    rng = np.random.default_rng(seed)
    occupied = np.zeros((height, width), dtype=bool)
    shapes = []

    def place(r, c, h, w):
        if r < 0 or c < 0 or h < min_dim or w < min_dim or r + h > height or c + w > width:
            return False
        if occupied[r : r + h, c : c + w].any():
            return False
        occupied[r : r + h, c : c + w] = True
        shapes.append({"type": "rect", "row": int(r), "col": int(c), "h": int(h), "w": int(w)})
        return True

    for _ in range(n * 20):
        if len(shapes) >= n:
            break
        h, w = (int(v) for v in rng.integers(min_dim, max_dim + 1, size=2))
        r, c = int(rng.integers(0, height - h + 1)), int(rng.integers(0, width - w + 1))
        if not place(r, c, h, w):
            continue
        if rng.random() < pair_prob:
            h2, w2 = (int(v) for v in rng.integers(min_dim, max_dim + 1, size=2))
            side = int(rng.integers(4))
            if side == 0:
                place(r, c + w, h2, w2)
            elif side == 1:
                place(r + h, c, h2, w2)
            elif side == 2:
                place(r, c - w2, h2, w2)
            else:
                place(r - h2, c, h2, w2)
    return SceneSpec(width, height, shapes, seed)


def render_image(im: InstanceMap, seed: int = 0) -> np.ndarray:
    """Flat-shaded vehicles over a noisy asphalt-like background (RGB uint8)."""
    rng = np.random.default_rng(seed)
    h, w = im.shape
    base = rng.normal(90, 12, size=(h, w, 1)) + rng.normal(0, 4, size=(h, w, 3))
    img = np.clip(base, 0, 255).astype(np.uint8)
    if im.n_instances:
        palette = rng.integers(30, 256, size=(im.n_instances + 1, 3), dtype=np.uint8)
        mask = im.labels != 0
        img[mask] = palette[im.labels[mask]]
    return img
