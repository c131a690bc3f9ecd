"""
Sliding-window classification of rasters larger than the model input.

Windows of ``cfg.window`` pixels step by ``cfg.stride``; the last window on
each axis is shifted inward to end flush with the raster edge.  Per-class
probabilities from overlapping windows are averaged uniformly.

A predictor is any callable ``predictor(window, origin) -> (3, h, w)`` where
``window`` is the ``(h, w[, channels])`` image patch and ``origin`` its
``(row, col)`` in the full raster.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from cityseg.errors import ContractViolation, TileIOError, ValidationError
from cityseg.raster import N_CLASSES, ProbMap, as_classmap, png_bit_depth, read_png, write_png

log = logging.getLogger(__name__)


class Predictor(Protocol):
    def __call__(self, window: np.ndarray, origin: tuple[int, int]) -> np.ndarray: ...


@dataclass(frozen=True)
class MosaicConfig:
    window: int = 256
    stride: int = 128
    edge_policy: str = "shift_inward"

    def __post_init__(self):
        if self.window < 1 or not 1 <= self.stride <= self.window:
            raise ValidationError(f"need 1 <= stride <= window, got stride={self.stride} window={self.window}")
        if self.edge_policy != "shift_inward":
            raise ValidationError("only the shift_inward edge policy is supported")


def window_origins(dim: int, window: int, stride: int) -> list[int]:
    """Origins along one axis; the final one ends exactly at ``dim``."""
    if dim < window:
        raise ValidationError(f"raster dimension {dim} is smaller than the {window}px window; pad the input")
    origins = list(range(0, dim - window + 1, stride))
    if origins[-1] != dim - window:
        origins.append(dim - window)
    return origins


def window_grid(shape: tuple[int, int], cfg: MosaicConfig) -> list[tuple[int, int]]:
    rows = window_origins(shape[0], cfg.window, cfg.stride)
    cols = window_origins(shape[1], cfg.window, cfg.stride)
    return [(r, c) for r in rows for c in cols]


def _read_band(raster, row0: int, h: int) -> np.ndarray:
    if isinstance(raster, np.ndarray):
        return raster[row0 : row0 + h]
    return raster.read_window(row0, 0, h, raster.shape[1])


def _checked(pred, origin, size: int) -> np.ndarray:
    pred = np.asarray(pred)
    if pred.shape != (N_CLASSES, size, size):
        raise ContractViolation(
            f"predictor output at window origin {origin}: expected {(N_CLASSES, size, size)}, got {pred.shape}"
        )
    if (pred < 0).any() or not np.isfinite(pred).all():
        raise ContractViolation(f"predictor output at window origin {origin}: negative or non-finite probabilities")
    return pred


def predict_large(raster, predictor: Predictor, cfg: MosaicConfig = MosaicConfig(), threads: int = 1) -> ProbMap:
    """Classify ``raster`` (array or :class:`~cityseg.raster.TiledRaster`)
    window by window and return the finalized, averaged ProbMap."""
    height, width = raster.shape[:2]
    row_origins = window_origins(height, cfg.window, cfg.stride)
    col_origins = window_origins(width, cfg.window, cfg.stride)
    pm = ProbMap(height, width)
    size = cfg.window
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        for r in row_origins:
            band = _read_band(raster, r, size)
            origins = [(r, c) for c in col_origins]

            def run(origin):
                return _checked(predictor(band[:, origin[1] : origin[1] + size], origin), origin, size)

            results = pool.map(run, origins) if pool else map(run, origins)
            # accumulation stays on this thread
            for (rr, cc), pred in zip(origins, results):
                pm.add(pred, rr, cc)
    finally:
        if pool:
            pool.shutdown()
    log.debug("accumulated %d windows", len(row_origins) * len(col_origins))
    return pm.finalize()


def argmax_classmap(pm: ProbMap, band: int = 1024) -> np.ndarray:
    """Most probable class per pixel; ties go to the lower class code."""
    probs = pm.probs
    out = np.empty(pm.shape, dtype=np.uint8)
    for r0 in range(0, pm.shape[0], band):
        out[r0 : r0 + band] = np.argmax(probs[:, r0 : r0 + band], axis=0)
    return out


def one_hot(cm: np.ndarray) -> np.ndarray:
    out = np.zeros((N_CLASSES,) + cm.shape, dtype=np.float32)
    for k in range(N_CLASSES):
        out[k][cm == k] = 1.0
    return out


class OraclePredictor:
    """One-hot predictions read from a ground-truth class map.

    With ``noise > 0`` each pixel flips to a uniformly chosen other class with
    that probability.  Flips are drawn once for the whole map, so a pixel
    looks the same in every window that covers it.
    """

    def __init__(self, gt: np.ndarray, noise: float = 0.0, seed: int = 0, band: int = 1024):
        if not 0 <= noise < 1:
            raise ValidationError(f"noise must be in [0, 1), got {noise}")
        gt = as_classmap(gt)
        self.noise, self.seed = noise, seed
        if noise == 0:
            self.classes = gt
            return
        rng = np.random.default_rng(seed)
        classes = gt.copy()
        for r0 in range(0, gt.shape[0], band):
            block = classes[r0 : r0 + band]
            flip = rng.random(block.shape) < noise
            shift = rng.integers(1, N_CLASSES, size=block.shape, dtype=np.uint8)
            block[flip] = (block[flip] + shift[flip]) % N_CLASSES
        self.classes = classes

    def __call__(self, window: np.ndarray, origin: tuple[int, int]) -> np.ndarray:
        r, c = origin
        h, w = window.shape[:2]
        H, W = self.classes.shape
        if r < 0 or c < 0 or r + h > H or c + w > W:
            raise IndexError(f"window at {origin} of size {h}x{w} lies outside the {H}x{W} ground truth")
        return one_hot(self.classes[r : r + h, c : c + w])


def pred_filename(row: int, col: int) -> str:
    return f"pred_r{row}_c{col}.png"


def encode_probabilities(probs: np.ndarray) -> np.ndarray:
    """(3, h, w) probabilities to an (h, w, 3) 16-bit image."""
    scaled = np.rint(np.clip(probs, 0, 1) * 65535.0)
    return np.ascontiguousarray(scaled.transpose(1, 2, 0)).astype(np.uint16)


class DirectoryPredictor:
    """Reads ``pred_r{row}_c{col}.png`` files produced by an external model.

    Files are 16-bit RGB PNGs with channels (background, interior, border);
    probability = value / 65535.
    """

    def __init__(self, directory, cfg: MosaicConfig = MosaicConfig()):
        self.directory = Path(directory)
        self.cfg = cfg
        if not self.directory.is_dir():
            raise TileIOError(f"prediction directory {self.directory} does not exist")

    def __call__(self, window: np.ndarray, origin: tuple[int, int]) -> np.ndarray:
        name = pred_filename(*origin)
        path = self.directory / name
        if not path.exists():
            raise TileIOError(f"missing prediction file {name} in {self.directory}")
        if png_bit_depth(path) != 16:
            raise ContractViolation(f"{name}: expected a 16-bit RGB PNG")
        arr = read_png(path)
        h, w = window.shape[:2]
        if arr.shape != (h, w, 3):
            raise ContractViolation(f"{name}: expected shape {(h, w, 3)}, got {arr.shape}")
        return arr.transpose(2, 0, 1).astype(np.float32) / 65535.0


def dump_predictions(raster, predictor: Predictor, cfg: MosaicConfig, directory) -> list[Path]:
    """Write one exchange file per window origin (the DirectoryPredictor format)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for r, c in window_grid(raster.shape[:2], cfg):
        band = _read_band(raster, r, cfg.window)
        pred = _checked(predictor(band[:, c : c + cfg.window], (r, c)), (r, c), cfg.window)
        path = directory / pred_filename(r, c)
        write_png(path, encode_probabilities(pred))
        written.append(path)
    return written


def save_probmap(path, pm: ProbMap) -> None:
    """Finalized probabilities as a single 16-bit RGB PNG."""
    write_png(path, encode_probabilities(pm.probs))
