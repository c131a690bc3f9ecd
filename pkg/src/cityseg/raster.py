"""
Grid containers, georeferencing and raster file formats.

Everything is stored row-major and indexed ``(row, col)``.  Class maps are
plain ``uint8`` arrays with codes 0 (background), 1 (interior) and 2 (border);
instance maps carry their id count alongside the label array.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import png
from PIL import Image

from cityseg.errors import ContractViolation, TileIOError, ValidationError

BACKGROUND, INTERIOR, BORDER = 0, 1, 2
N_CLASSES = 3


@dataclass(frozen=True)
class GeoTransform:
    """Affine pixel <-> world mapping for a north-up raster.

    ``origin_x``/``origin_y`` locate the outer corner of pixel (0, 0).
    """

    origin_x: float = 0.0
    origin_y: float = 0.0
    pixel_size_x: float = 1.0
    pixel_size_y: float = -1.0

    def __post_init__(self):
        if self.pixel_size_x == 0 or self.pixel_size_y == 0:
            raise ValidationError("pixel sizes must be non-zero")
        for name in ("origin_x", "origin_y", "pixel_size_x", "pixel_size_y"):
            if not math.isfinite(getattr(self, name)):
                raise ValidationError(f"{name} must be finite")

    @classmethod
    def parse(cls, text: str) -> GeoTransform:
        """Parse ``"origin_x,origin_y,pixel_size_x,pixel_size_y"``."""
        parts = [p for p in text.replace(" ", "").split(",") if p]
        if len(parts) != 4:
            raise ValidationError(f"geotransform needs 4 comma-separated numbers, got {text!r}")
        try:
            return cls(*(float(p) for p in parts))
        except ValueError as err:
            raise ValidationError(f"bad geotransform {text!r}: {err}") from None

    @classmethod
    def from_dict(cls, d: dict) -> GeoTransform:
        return cls(
            float(d["origin_x"]),
            float(d["origin_y"]),
            float(d["pixel_size_x"]),
            float(d["pixel_size_y"]),
        )

    def to_dict(self) -> dict:
        return {
            "origin_x": self.origin_x,
            "origin_y": self.origin_y,
            "pixel_size_x": self.pixel_size_x,
            "pixel_size_y": self.pixel_size_y,
        }

    @property
    def pixel_area(self) -> float:
        return abs(self.pixel_size_x * self.pixel_size_y)

    def pixel_to_world(self, row, col):
        """World coordinate of the pixel center."""
        x = self.origin_x + (np.asarray(col) + 0.5) * self.pixel_size_x
        y = self.origin_y + (np.asarray(row) + 0.5) * self.pixel_size_y
        if np.ndim(x) == 0:
            return float(x), float(y)
        return x, y

    def corner_to_world(self, row, col):
        """World coordinate of a pixel-corner lattice point."""
        x = self.origin_x + np.asarray(col, dtype=float) * self.pixel_size_x
        y = self.origin_y + np.asarray(row, dtype=float) * self.pixel_size_y
        return x, y

    def world_to_fractional(self, x, y):
        """Continuous ``(row, col)`` position; pixel centers sit at ``k + 0.5``."""
        col = (np.asarray(x, dtype=float) - self.origin_x) / self.pixel_size_x
        row = (np.asarray(y, dtype=float) - self.origin_y) / self.pixel_size_y
        return row, col

    def world_to_pixel(self, x, y):
        """Index of the pixel containing ``(x, y)``; may be out of bounds."""
        row, col = self.world_to_fractional(x, y)
        row, col = np.floor(row).astype(np.int64), np.floor(col).astype(np.int64)
        if row.ndim == 0:
            return int(row), int(col)
        return row, col


def pixel_to_world(gt: GeoTransform, row, col):
    return gt.pixel_to_world(row, col)


def world_to_pixel(gt: GeoTransform, x, y):
    return gt.world_to_pixel(x, y)


def as_classmap(values) -> np.ndarray:
    """Validate and return a ``uint8`` class map."""
    arr = np.asarray(values)
    if arr.ndim != 2 or arr.size == 0:
        raise ValidationError(f"class map must be a non-empty 2-D grid, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if arr.min() < 0 or arr.max() > 2:
            raise ValidationError("class map values must be in {0, 1, 2}")
        arr = arr.astype(np.uint8)
    elif arr.max() > 2:
        raise ValidationError("class map values must be in {0, 1, 2}")
    return arr


@dataclass
class InstanceMap:
    """Per-pixel object ids: 0 is background, objects are ``1..n_instances``."""

    labels: np.ndarray
    n_instances: int

    def __post_init__(self):
        if self.labels.ndim != 2 or self.labels.size == 0:
            raise ValidationError(f"instance map must be a non-empty 2-D grid, got {self.labels.shape}")

    @classmethod
    def empty(cls, height: int, width: int) -> InstanceMap:
        return cls(np.zeros((height, width), dtype=np.uint32), 0)

    @classmethod
    def from_labels(cls, labels) -> InstanceMap:
        """Build from arbitrary non-negative ids, compacting them to
        ``1..N`` in row-major order of first appearance."""
        labels = np.asarray(labels)
        if labels.size and labels.min() < 0:
            raise ValidationError("instance ids must be non-negative")
        compact, n = compact_ids(labels)
        return cls(compact, n)

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def validate(self) -> None:
        """Check the ``{1..N}`` invariant; raises ValidationError."""
        present = np.unique(self.labels)
        present = present[present != 0]
        expected = np.arange(1, self.n_instances + 1)
        if present.shape != expected.shape or not np.array_equal(present, expected):
            raise ValidationError(
                f"instance ids must be exactly 1..{self.n_instances}, found {present.size} distinct ids"
            )

    def areas(self) -> np.ndarray:
        """Pixel count per id; index 0 is background."""
        return np.bincount(self.labels.ravel(), minlength=self.n_instances + 1)


def compact_ids(labels: np.ndarray) -> tuple[np.ndarray, int]:
    flat = labels.ravel()
    ids, first = np.unique(flat, return_index=True)
    keep = ids != 0
    ids, first = ids[keep], first[keep]
    order = ids[np.argsort(first, kind="stable")]
    n = int(order.size)
    out = np.zeros(labels.shape, dtype=np.uint32)
    if n:
        lut_keys = np.sort(order)
        new_ids = np.empty(n, dtype=np.uint32)
        new_ids[np.searchsorted(lut_keys, order)] = np.arange(1, n + 1, dtype=np.uint32)
        nz = flat != 0
        out.ravel()[nz] = new_ids[np.searchsorted(lut_keys, flat[nz])]
    return out, n


def canonical_partition(labels: np.ndarray) -> np.ndarray:
    """Relabel ids in row-major first-appearance order (for comparisons)."""
    return compact_ids(np.asarray(labels))[0]


class ProbMap:
    """Per-class probability accumulator used by the mosaicker.

    Sums are kept in float32 with an integer contribution count per pixel;
    :meth:`finalize` turns them into probabilities in place.
    """

    def __init__(self, height: int, width: int):
        self.sums = np.zeros((N_CLASSES, height, width), dtype=np.float32)
        self.counts = np.zeros((height, width), dtype=np.uint32)
        self.finalized = False

    @classmethod
    def from_probabilities(cls, probs) -> ProbMap:
        probs = np.asarray(probs, dtype=np.float32)
        if probs.ndim != 3 or probs.shape[0] != N_CLASSES:
            raise ValidationError(f"expected (3, H, W) probabilities, got {probs.shape}")
        pm = cls(probs.shape[1], probs.shape[2])
        pm.sums[...] = probs
        pm.counts[...] = 1
        pm.finalize()
        return pm

    @property
    def shape(self) -> tuple[int, int]:
        return self.counts.shape

    @property
    def probs(self) -> np.ndarray:
        if not self.finalized:
            raise ValidationError("ProbMap has not been finalized")
        return self.sums

    def add(self, window: np.ndarray, row0: int, col0: int) -> None:
        if self.finalized:
            raise ValidationError("cannot accumulate into a finalized ProbMap")
        _, h, w = window.shape
        self.sums[:, row0 : row0 + h, col0 : col0 + w] += window
        self.counts[row0 : row0 + h, col0 : col0 + w] += 1

    def finalize(self, band: int = 1024) -> ProbMap:
        """Average and renormalize so each covered pixel sums to 1."""
        if self.finalized:
            return self
        for r0 in range(0, self.shape[0], band):
            s = self.sums[:, r0 : r0 + band]
            c = self.counts[r0 : r0 + band]
            np.divide(s, np.maximum(c, 1), out=s)
            total = s.sum(axis=0)
            np.divide(s, total, out=s, where=total > 0)
            np.clip(s, 0.0, 1.0, out=s)
        self.finalized = True
        return self


# --------------------------------------------------------------------------
# PNG codecs
# --------------------------------------------------------------------------


def write_png(path, array: np.ndarray) -> None:
    """Write an 8/16-bit gray or RGB array as PNG."""
    path = Path(path)
    arr = np.ascontiguousarray(array)
    if arr.dtype not in (np.uint8, np.uint16):
        raise ValidationError(f"PNG supports uint8/uint16, got {arr.dtype}")
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.dtype == np.uint16 and arr.ndim == 3:
        if arr.shape[2] != 3:
            raise ValidationError("16-bit PNGs must be gray or RGB")
        h, w, _ = arr.shape
        writer = png.Writer(width=w, height=h, greyscale=False, bitdepth=16)
        with open(path, "wb") as fh:
            writer.write(fh, arr.reshape(h, w * 3))
        return
    Image.fromarray(arr).save(path, format="PNG")


def png_bit_depth(path) -> int:
    with open(path, "rb") as fh:
        head = fh.read(25)
    if head[:8] != b"\x89PNG\r\n\x1a\n":
        raise TileIOError(f"{path}: not a PNG file")
    return head[24]


def read_png(path) -> np.ndarray:
    path = Path(path)
    try:
        depth = png_bit_depth(path)
        if depth == 16:
            w, h, rows, info = png.Reader(filename=str(path)).asDirect()
            planes = info["planes"]
            arr = np.vstack([np.asarray(r, dtype=np.uint16) for r in rows])
            arr = arr.reshape(h, w, planes)
            return arr[:, :, 0] if planes == 1 else arr
        with Image.open(path) as img:
            if img.mode == "P":
                img = img.convert("RGB")
            return np.array(img)
    except FileNotFoundError:
        raise TileIOError(f"missing raster file: {path}") from None
    except (OSError, png.Error, ValueError) as err:
        if isinstance(err, TileIOError):
            raise
        raise TileIOError(f"cannot decode {path}: {err}") from None


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def write_json(path, obj: Any) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def save_classmap(path, cm: np.ndarray) -> None:
    write_png(path, as_classmap(cm))


def load_classmap(path) -> np.ndarray:
    arr = read_png(path)
    if arr.ndim == 3:
        arr = arr[:, :, 0]
    return as_classmap(arr)


def save_instances(path, im: InstanceMap, gt: GeoTransform | None = None, extra: dict | None = None) -> None:
    """16-bit PNG plus a ``<name>.meta.json`` sidecar."""
    if im.n_instances > 65535:
        raise ValidationError(f"{im.n_instances} instances exceed the 16-bit PNG limit of 65535")
    write_png(path, im.labels.astype(np.uint16))
    meta = {"n_instances": im.n_instances, "geotransform": gt.to_dict() if gt else None}
    if extra:
        meta.update(extra)
    write_json(sidecar_path(path), meta)


def load_instances(path) -> tuple[InstanceMap, GeoTransform | None]:
    arr = read_png(path)
    if arr.ndim == 3:
        arr = arr[:, :, 0]
    side = sidecar_path(path)
    gt = None
    if side.exists():
        meta = json.loads(side.read_text(encoding="utf-8"))
        if meta.get("geotransform"):
            gt = GeoTransform.from_dict(meta["geotransform"])
        if "n_instances" in meta:
            im = InstanceMap(arr.astype(np.uint32), int(meta["n_instances"]))
        else:
            im = InstanceMap.from_labels(arr.astype(np.uint32))
    else:
        im = InstanceMap.from_labels(arr.astype(np.uint32))
    return im, gt


# --------------------------------------------------------------------------
# Tiled rasters
# --------------------------------------------------------------------------

MANIFEST_NAME = "manifest.json"


@dataclass
class TiledRasterManifest:
    width: int
    height: int
    tile_size: int
    channels: int
    bit_depth: int
    geotransform: GeoTransform = field(default_factory=GeoTransform)
    tiles: list[tuple[int, int, str]] = field(default_factory=list)

    @property
    def tile_rows(self) -> int:
        return -(-self.height // self.tile_size)

    @property
    def tile_cols(self) -> int:
        return -(-self.width // self.tile_size)

    def validate(self) -> None:
        if self.width < 1 or self.height < 1 or self.tile_size < 1:
            raise ValidationError("manifest dimensions must be positive")
        if self.bit_depth not in (8, 16):
            raise ValidationError(f"bit_depth must be 8 or 16, got {self.bit_depth}")
        if self.channels not in (1, 3):
            raise ValidationError(f"channels must be 1 or 3, got {self.channels}")
        seen = {(tr, tc) for tr, tc, _ in self.tiles}
        expected = {(tr, tc) for tr in range(self.tile_rows) for tc in range(self.tile_cols)}
        if len(seen) != len(self.tiles) or seen != expected:
            raise ValidationError("manifest must list every tile index exactly once")

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "tile_size": self.tile_size,
            "channels": self.channels,
            "bit_depth": self.bit_depth,
            "geotransform": self.geotransform.to_dict(),
            "tiles": [[tr, tc, p] for tr, tc, p in self.tiles],
        }

    @classmethod
    def from_dict(cls, d: dict) -> TiledRasterManifest:
        m = cls(
            width=int(d["width"]),
            height=int(d["height"]),
            tile_size=int(d["tile_size"]),
            channels=int(d["channels"]),
            bit_depth=int(d["bit_depth"]),
            geotransform=GeoTransform.from_dict(d["geotransform"]),
            tiles=[(int(tr), int(tc), str(p)) for tr, tc, p in d["tiles"]],
        )
        m.validate()
        return m


class TiledRaster:
    """Read-only view over a directory of PNG tiles described by a manifest."""

    def __init__(self, root, manifest: TiledRasterManifest):
        self.root = Path(root)
        self.manifest = manifest
        self._paths = {(tr, tc): p for tr, tc, p in manifest.tiles}

    @classmethod
    def open(cls, root) -> TiledRaster:
        root = Path(root)
        try:
            data = json.loads((root / MANIFEST_NAME).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise TileIOError(f"no {MANIFEST_NAME} in {root}") from None
        return cls(root, TiledRasterManifest.from_dict(data))

    @property
    def shape(self) -> tuple[int, ...]:
        m = self.manifest
        if m.channels == 1:
            return (m.height, m.width)
        return (m.height, m.width, m.channels)

    @property
    def dtype(self):
        return np.uint8 if self.manifest.bit_depth == 8 else np.uint16

    @property
    def geotransform(self) -> GeoTransform:
        return self.manifest.geotransform

    def read_tile(self, tile_row: int, tile_col: int) -> np.ndarray:
        m = self.manifest
        rel = self._paths.get((tile_row, tile_col))
        if rel is None:
            raise TileIOError(f"tile ({tile_row}, {tile_col}) is not listed in the manifest")
        path = self.root / rel
        arr = read_png(path)
        expect = (m.tile_size, m.tile_size) + (() if m.channels == 1 else (m.channels,))
        if arr.shape != expect or arr.dtype != self.dtype:
            raise TileIOError(
                f"tile {rel}: expected {expect} {np.dtype(self.dtype)}, got {arr.shape} {arr.dtype}"
            )
        return arr

    def read_window(self, row0: int, col0: int, h: int, w: int) -> np.ndarray:
        m = self.manifest
        if h < 1 or w < 1 or row0 < 0 or col0 < 0 or row0 + h > m.height or col0 + w > m.width:
            raise IndexError(
                f"window rows [{row0}, {row0 + h}) cols [{col0}, {col0 + w}) outside "
                f"{m.height}x{m.width} raster"
            )
        out = np.empty((h, w) + self.shape[2:], dtype=self.dtype)
        ts = m.tile_size
        for tr in range(row0 // ts, (row0 + h - 1) // ts + 1):
            for tc in range(col0 // ts, (col0 + w - 1) // ts + 1):
                tile = self.read_tile(tr, tc)
                r_lo, r_hi = max(row0, tr * ts), min(row0 + h, (tr + 1) * ts)
                c_lo, c_hi = max(col0, tc * ts), min(col0 + w, (tc + 1) * ts)
                out[r_lo - row0 : r_hi - row0, c_lo - col0 : c_hi - col0] = tile[
                    r_lo - tr * ts : r_hi - tr * ts, c_lo - tc * ts : c_hi - tc * ts
                ]
        return out

    def __getitem__(self, key):
        rows, cols = key[0], key[1]
        r0, r1, _ = rows.indices(self.manifest.height)
        c0, c1, _ = cols.indices(self.manifest.width)
        return self.read_window(r0, c0, r1 - r0, c1 - c0)

    def to_array(self) -> np.ndarray:
        return self.read_window(0, 0, self.manifest.height, self.manifest.width)


def write_tiled(root, array: np.ndarray, tile_size: int = 256, gt: GeoTransform | None = None) -> TiledRaster:
    """Split ``array`` into zero-padded PNG tiles under ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(array)
    if arr.dtype not in (np.uint8, np.uint16):
        raise ValidationError(f"tiled rasters hold uint8/uint16, got {arr.dtype}")
    height, width = arr.shape[:2]
    channels = 1 if arr.ndim == 2 else arr.shape[2]
    manifest = TiledRasterManifest(
        width=width,
        height=height,
        tile_size=tile_size,
        channels=channels,
        bit_depth=8 if arr.dtype == np.uint8 else 16,
        geotransform=gt or GeoTransform(),
    )
    for tr in range(manifest.tile_rows):
        for tc in range(manifest.tile_cols):
            block = arr[tr * tile_size : (tr + 1) * tile_size, tc * tile_size : (tc + 1) * tile_size]
            tile = np.zeros((tile_size, tile_size) + arr.shape[2:], dtype=arr.dtype)
            tile[: block.shape[0], : block.shape[1]] = block
            rel = f"tile_r{tr}_c{tc}.png"
            write_png(root / rel, tile)
            manifest.tiles.append((tr, tc, rel))
    manifest.validate()
    write_json(root / MANIFEST_NAME, manifest.to_dict())
    return TiledRaster(root, manifest)


def open_raster(path):
    """Open a tiled-raster directory or a single PNG file."""
    path = Path(path)
    if path.is_dir():
        return TiledRaster.open(path)
    return read_png(path)


def check_window_shape(arr: np.ndarray, shape: tuple[int, int], what: str) -> None:
    if arr.shape[-2:] != tuple(shape):
        raise ContractViolation(f"{what}: expected spatial shape {tuple(shape)}, got {arr.shape}")
