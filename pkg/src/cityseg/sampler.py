"""
Point-driven training sample generator.

Each input point becomes one square tile centered on the pixel under the
point.  For every tile we write the image crop, the 3-class mask crop and a
16-bit instance crop whose ids are renumbered 1..n inside the tile, plus an
optional COCO instance-segmentation document covering all tiles.

Points close together yield overlapping tiles on purpose; that is a cheap
form of augmentation.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from cityseg.errors import ValidationError
from cityseg.raster import GeoTransform, InstanceMap, as_classmap, compact_ids, read_png, write_json, write_png
from cityseg.vectorize import trace_mask


@dataclass
class PointSet:
    points: list[tuple[float, float]] = field(default_factory=list)
    labels: list[str | None] = field(default_factory=list)

    def __post_init__(self):
        for x, y in self.points:
            if not (np.isfinite(x) and np.isfinite(y)):
                raise ValidationError(f"non-finite point ({x}, {y})")


def read_points(path) -> PointSet:
    """Point and MultiPoint features from a GeoJSON file."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    pts, labels = [], []
    for feat in doc.get("features", []):
        geom = feat.get("geometry") or {}
        label = (feat.get("properties") or {}).get("label")
        if geom.get("type") == "Point":
            coords = [geom["coordinates"]]
        elif geom.get("type") == "MultiPoint":
            coords = geom["coordinates"]
        else:
            continue
        for c in coords:
            pts.append((float(c[0]), float(c[1])))
            labels.append(label)
    return PointSet(pts, labels)


@dataclass(frozen=True)
class SampleSpec:
    out_dir: Path
    tile_size: int = 256
    emit_coco: bool = True
    border_policy: str = "clamp"

    def __post_init__(self):
        if self.tile_size < 32:
            raise ValidationError(f"tile_size must be >= 32, got {self.tile_size}")
        if self.border_policy not in ("clamp", "skip"):
            raise ValidationError(f"border_policy must be clamp or skip, got {self.border_policy!r}")


@dataclass
class SampleTile:
    index: int
    point_index: int
    point: tuple[float, float]
    row0: int
    col0: int
    image: str
    mask: str
    instances: str
    n_instances: int
    clipped: list[int]


@dataclass
class SampleManifest:
    out_dir: Path
    tile_size: int
    tiles: list[SampleTile] = field(default_factory=list)
    skipped: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "tile_size": self.tile_size,
            "tiles": [asdict(t) for t in self.tiles],
            "skipped": self.skipped,
        }

    def save(self, name: str = "manifest.json") -> Path:
        path = Path(self.out_dir) / name
        write_json(path, self.to_dict())
        return path

    @classmethod
    def load(cls, path) -> SampleManifest:
        path = Path(path)
        d = json.loads(path.read_text(encoding="utf-8"))
        tiles = [SampleTile(**{**t, "point": tuple(t["point"])}) for t in d["tiles"]]
        return cls(path.parent, d["tile_size"], tiles, d.get("skipped", []))


def tile_origin(center: int, size: int, dim: int, policy: str) -> int | None:
    """Top-left coordinate of a tile whose center pixel is ``center``."""
    start = center - size // 2
    if 0 <= start and start + size <= dim:
        return start
    if policy == "skip":
        return None
    return min(max(start, 0), dim - size)


def _crop(raster, r0: int, c0: int, size: int) -> np.ndarray:
    if isinstance(raster, np.ndarray):
        return raster[r0 : r0 + size, c0 : c0 + size]
    return raster.read_window(r0, c0, size, size)


def generate_samples(
    image,
    gt: InstanceMap,
    gt_classes: np.ndarray,
    pts: PointSet,
    spec: SampleSpec,
    geotransform: GeoTransform,
    gt_geotransform: GeoTransform | None = None,
) -> SampleManifest:
    """Write one tile triplet per accepted point and return the manifest.

    ``image`` is an array or tiled raster sharing the ground truth's grid.
    Points outside the raster are always skipped; points too close to an
    edge are shifted inward (``clamp``) or skipped (``skip``).
    """
    gt_classes = as_classmap(gt_classes)
    height, width = gt.shape
    if tuple(image.shape[:2]) != (height, width) or gt_classes.shape != (height, width):
        raise ValidationError(
            f"image {tuple(image.shape[:2])}, instances {gt.shape} and classes {gt_classes.shape} must match"
        )
    img_gt = getattr(image, "geotransform", None)
    for other in (img_gt, gt_geotransform):
        if other is not None and other != geotransform:
            raise ValidationError(f"geotransform mismatch: {other} vs {geotransform}")
    size = spec.tile_size
    if size > height or size > width:
        raise ValidationError(f"tile size {size} exceeds the {height}x{width} raster")
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    global_area = gt.areas()
    manifest = SampleManifest(out, size)
    for i, (x, y) in enumerate(pts.points):
        row, col = geotransform.world_to_pixel(x, y)
        if not (0 <= row < height and 0 <= col < width):
            manifest.skipped.append({"point_index": i, "point": [x, y], "reason": "outside raster"})
            continue
        r0 = tile_origin(row, size, height, spec.border_policy)
        c0 = tile_origin(col, size, width, spec.border_policy)
        if r0 is None or c0 is None:
            manifest.skipped.append({"point_index": i, "point": [x, y], "reason": "too close to edge"})
            continue
        k = len(manifest.tiles)
        crop = gt.labels[r0 : r0 + size, c0 : c0 + size]
        local, n = compact_ids(crop)
        # a local id is clipped when the tile holds only part of its object
        clipped = []
        if n:
            glob_ids = np.zeros(n + 1, dtype=np.int64)
            glob_ids[local.ravel()] = crop.ravel()
            local_area = np.bincount(local.ravel(), minlength=n + 1)
            clipped = [j for j in range(1, n + 1) if local_area[j] < global_area[glob_ids[j]]]
        tile = SampleTile(
            index=k,
            point_index=i,
            point=(x, y),
            row0=int(r0),
            col0=int(c0),
            image=f"img_{k}.png",
            mask=f"mask_{k}.png",
            instances=f"inst_{k}.png",
            n_instances=n,
            clipped=clipped,
        )
        write_png(out / tile.image, np.ascontiguousarray(_crop(image, r0, c0, size)))
        write_png(out / tile.mask, np.ascontiguousarray(gt_classes[r0 : r0 + size, c0 : c0 + size]))
        write_png(out / tile.instances, local.astype(np.uint16))
        manifest.tiles.append(tile)
    manifest.save()
    if spec.emit_coco:
        write_json(out / "coco.json", coco_export(manifest))
    return manifest


def _flatten_ring(ring) -> list[int]:
    coords = []
    for r, c in ring[:-1]:
        coords.extend((int(c), int(r)))
    return coords


def coco_export(manifest: SampleManifest) -> dict:
    """COCO instance-segmentation document for the manifest's tiles.

    Segmentation polygons follow pixel edges in tile coordinates (x = col,
    y = row).  Hole rings are listed after their exterior, so an even-odd
    fill of all rings reproduces the instance mask.
    """
    images, annotations = [], []
    for tile in manifest.tiles:
        image_id = tile.index + 1
        labels = read_png(Path(manifest.out_dir) / tile.instances)
        h, w = labels.shape[:2]
        images.append({"id": image_id, "file_name": tile.image, "width": w, "height": h})
        clipped = set(tile.clipped)
        for local_id, sl in enumerate(ndimage.find_objects(labels), start=1):
            if sl is None:
                continue
            mask = labels[sl] == local_id
            r0, c0 = sl[0].start, sl[1].start
            segmentation = []
            for poly in trace_mask(mask):
                for ring in poly:
                    segmentation.append(_flatten_ring([(r + r0, c + c0) for r, c in ring]))
            annotations.append(
                {
                    "id": len(annotations) + 1,
                    "image_id": image_id,
                    "category_id": 1,
                    "segmentation": segmentation,
                    "bbox": [c0, r0, sl[1].stop - c0, sl[0].stop - r0],
                    "area": int(mask.sum()),
                    "iscrowd": 0,
                    "clipped": local_id in clipped,
                }
            )
    return {
        "images": images,
        "annotations": annotations,
        "categories": [{"id": 1, "name": "vehicle"}],
    }
