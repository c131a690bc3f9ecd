"""Command-line entry point: one subcommand per pipeline stage.

Exit codes: 0 ok, 2 data validation, 64 usage, 74 I/O.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from cityseg.errors import ContractViolation, TileIOError, ValidationError
from cityseg.groundtruth import (
    count_thin_objects,
    degenerate_features,
    derive_three_class,
    rasterize_features,
    read_geojson,
    write_geojson,
)
from cityseg.instancer import InstancerConfig, semantic_to_instances
from cityseg.metrics import MatchConfig, evaluation_report
from cityseg.mosaicker import (
    DirectoryPredictor,
    MosaicConfig,
    OraclePredictor,
    argmax_classmap,
    predict_large,
    save_probmap,
    window_grid,
)
from cityseg.raster import (
    GeoTransform,
    load_classmap,
    load_instances,
    open_raster,
    png_bit_depth,
    save_classmap,
    save_instances,
    sidecar_path,
    write_json,
    write_png,
)
from cityseg.sampler import SampleSpec, generate_samples, read_points
from cityseg.synth import PRESETS, SceneSpec, preset_scene, render_image, synthesize_scene
from cityseg.vectorize import instances_to_features

EXIT_OK, EXIT_DATA, EXIT_USAGE, EXIT_IO = 0, 2, 64, 74

log = logging.getLogger("cityseg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _geotransform(text: str) -> GeoTransform:
    try:
        return GeoTransform.parse(text)
    except ValidationError as err:
        raise argparse.ArgumentTypeError(str(err)) from None


def _threads(args) -> int:
    if args.threads:
        return args.threads
    env = os.environ.get("CITYSEG_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"CITYSEG_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def _classes_sidecar(path: Path, extra: dict) -> None:
    write_json(sidecar_path(path), extra)


def _read_gt_sidecar(path) -> GeoTransform | None:
    side = sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text(encoding="utf-8"))
        if meta.get("geotransform"):
            return GeoTransform.from_dict(meta["geotransform"])
    return None


def _load_classes_any(path) -> np.ndarray:
    """Class map PNG, or a 16-bit instance PNG from which classes are derived."""
    if png_bit_depth(path) == 16:
        im, _ = load_instances(path)
        return derive_three_class(im)
    return load_classmap(path)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_rasterize(args) -> int:
    fc = read_geojson(args.geojson)
    skipped = degenerate_features(fc)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        im = rasterize_features(fc, args.gt, args.width, args.height)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    config = {
        "command": "rasterize",
        "source": str(args.geojson),
        "width": args.width,
        "height": args.height,
        "geotransform": args.gt.to_dict(),
        "derive_classes": args.derive_classes,
    }
    save_instances(args.output, im, args.gt, {"skipped_features": skipped, "config": config})
    if args.derive_classes:
        cm = derive_three_class(im)
        out = args.classes_out or args.output.with_name(args.output.stem + "_classes.png")
        save_classmap(out, cm)
        _classes_sidecar(
            out, {"geotransform": args.gt.to_dict(), "thin_objects": count_thin_objects(im, cm), "config": config}
        )
    print(f"{im.n_instances} instances -> {args.output}")
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg = MosaicConfig(window=args.window, stride=args.stride)
    raster = open_raster(args.image)
    gt = args.gt or getattr(raster, "geotransform", None) or _read_gt_sidecar(args.image)
    if args.oracle:
        gt = gt or _read_gt_sidecar(args.oracle)
        predictor = OraclePredictor(_load_classes_any(args.oracle), args.noise, args.seed)
        source = {"oracle": str(args.oracle), "noise": args.noise, "seed": args.seed}
    else:
        predictor = DirectoryPredictor(args.pred_dir, cfg)
        source = {"pred_dir": str(args.pred_dir)}
    pm = predict_large(raster, predictor, cfg, threads=_threads(args))
    cm = argmax_classmap(pm)
    save_classmap(args.output, cm)
    config = {
        "command": "infer",
        "image": str(args.image),
        "window": cfg.window,
        "stride": cfg.stride,
        "edge_policy": cfg.edge_policy,
        "n_windows": len(window_grid(cm.shape, cfg)),
        **source,
    }
    _classes_sidecar(args.output, {"geotransform": gt.to_dict() if gt else None, "config": config})
    if args.probs:
        save_probmap(args.probs, pm)
    print(f"{config['n_windows']} windows -> {args.output}")
    return EXIT_OK


def cmd_instances(args) -> int:
    cm = load_classmap(args.classes)
    cfg = InstancerConfig(
        connectivity=args.connectivity,
        fill_holes=not args.no_fill_holes,
        restrict_growth_to_semantic=args.restrict_growth,
        conflict_rule=f"{args.conflict}_id",
        min_component_area=args.min_area,
    )
    im = semantic_to_instances(cm, cfg)
    gt = args.gt or _read_gt_sidecar(args.classes)
    config = {
        "command": "instances",
        "classes": str(args.classes),
        "connectivity": cfg.connectivity,
        "fill_holes": cfg.fill_holes,
        "restrict_growth_to_semantic": cfg.restrict_growth_to_semantic,
        "conflict_rule": cfg.conflict_rule,
        "min_component_area": cfg.min_component_area,
    }
    save_instances(args.output, im, gt, {"config": config})
    print(f"{im.n_instances} instances -> {args.output}")
    return EXIT_OK


def cmd_vectorize(args) -> int:
    im, side_gt = load_instances(args.instances)
    gt = args.gt or side_gt
    if gt is None:
        raise UsageError("no geotransform: pass --gt or provide a .meta.json sidecar")
    fc = instances_to_features(im, gt)
    write_geojson(args.output, fc)
    print(f"{len(fc)} features -> {args.output}")
    return EXIT_OK


def cmd_samples(args) -> int:
    image = open_raster(args.image)
    im, side_gt = load_instances(args.instances)
    gt = args.gt or side_gt or getattr(image, "geotransform", None)
    if gt is None:
        raise UsageError("no geotransform: pass --gt or provide a .meta.json sidecar")
    cm = load_classmap(args.classes) if args.classes else derive_three_class(im)
    spec = SampleSpec(out_dir=args.output, tile_size=args.tile, emit_coco=args.coco, border_policy=args.policy)
    manifest = generate_samples(image, im, cm, read_points(args.points), spec, gt, side_gt)
    for s in manifest.skipped:
        print(f"warning: point {s['point_index']} skipped ({s['reason']})", file=sys.stderr)
    print(f"{len(manifest.tiles)} tiles -> {args.output}")
    return EXIT_OK


def _table(report: dict) -> str:
    o = report["objects"]
    lines = [
        f"{'metric':<22}{'value':>10}",
        f"{'IoU (exp. border)':<22}{report['iou_exp_border']:>10.4f}",
        f"{'IoU (no border)':<22}{report['iou_no_border']:>10.4f}",
        f"{'correct':<22}{o['correct']:>10d}",
        f"{'partial':<22}{o['partial']:>10d}",
        f"{'false negatives':<22}{o['false_negatives']:>10d}",
        f"{'false positives':<22}{o['false_positives']:>10d}",
    ]
    return "\n".join(lines)


def cmd_evaluate(args) -> int:
    pred_cm = load_classmap(args.pred_classes)
    gt_im, _ = load_instances(args.gt_instances)
    if args.pred_instances:
        pred_im, _ = load_instances(args.pred_instances)
    else:
        pred_im = semantic_to_instances(pred_cm)
    report = evaluation_report(pred_cm, pred_im, gt_im, MatchConfig(args.tau_correct, args.tau_partial))
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.output:
        args.output.write_text(text + "\n", encoding="utf-8")
    print(text)
    print(_table(report))
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.spec:
        spec = SceneSpec.load(args.spec)
        if args.seed is not None:
            spec.seed = args.seed
    elif args.preset:
        spec = preset_scene(args.preset, args.seed or 0)
    else:
        raise UsageError("give a scene-spec JSON or --preset")
    gt = args.gt or GeoTransform()
    im, fc = synthesize_scene(spec, gt)
    out: Path = args.output
    out.mkdir(parents=True, exist_ok=True)
    config = {"command": "synth", "scene": spec.to_dict(), "geotransform": gt.to_dict()}
    write_png(out / "image.png", render_image(im, spec.seed))
    write_json(sidecar_path(out / "image.png"), {"geotransform": gt.to_dict(), "config": config})
    save_instances(out / "gt_inst.png", im, gt, {"config": config})
    cm = derive_three_class(im)
    save_classmap(out / "gt_classes.png", cm)
    _classes_sidecar(out / "gt_classes.png", {"geotransform": gt.to_dict(), "config": config})
    write_geojson(out / "gt.geojson", fc)
    print(f"{im.n_instances} vehicles -> {out}")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cityseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--threads", type=int, default=None, help="internal parallelism (default: $CITYSEG_THREADS or all cores)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("rasterize", help="GeoJSON polygons -> instance raster")
    p.add_argument("geojson", type=Path)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--gt", type=_geotransform, required=True, help="origin_x,origin_y,pixel_x,pixel_y")
    p.add_argument("-o", "--output", type=Path, required=True)
    p.add_argument("--derive-classes", action="store_true", help="also write the 3-class mask")
    p.add_argument("--classes-out", type=Path)
    p.set_defaults(func=cmd_rasterize)

    p = sub.add_parser("infer", help="sliding-window classification")
    p.add_argument("image", type=Path, help="PNG or tiled-raster directory")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--oracle", type=Path, help="ground-truth class map (or 16-bit instance map)")
    src.add_argument("--pred-dir", type=Path, help="directory of pred_r{row}_c{col}.png files")
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--window", type=int, default=256)
    p.add_argument("--stride", type=int, default=128)
    p.add_argument("--gt", type=_geotransform)
    p.add_argument("--probs", type=Path, help="also write averaged probabilities (16-bit RGB PNG)")
    p.add_argument("-o", "--output", type=Path, required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("instances", help="class map -> instance map")
    p.add_argument("classes", type=Path)
    p.add_argument("--connectivity", type=int, choices=(4, 8), default=8)
    p.add_argument("--no-fill-holes", action="store_true")
    p.add_argument("--restrict-growth", action="store_true")
    p.add_argument("--conflict", choices=("min", "max"), default="min")
    p.add_argument("--min-area", type=int, default=1)
    p.add_argument("--gt", type=_geotransform)
    p.add_argument("-o", "--output", type=Path, required=True)
    p.set_defaults(func=cmd_instances)

    p = sub.add_parser("vectorize", help="instance map -> GeoJSON")
    p.add_argument("instances", type=Path)
    p.add_argument("--gt", type=_geotransform)
    p.add_argument("-o", "--output", type=Path, required=True)
    p.set_defaults(func=cmd_vectorize)

    p = sub.add_parser("samples", help="point-centered training tiles (+COCO)")
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--instances", type=Path, required=True)
    p.add_argument("--classes", type=Path)
    p.add_argument("--points", type=Path, required=True)
    p.add_argument("--tile", type=int, default=256)
    p.add_argument("--coco", action="store_true")
    p.add_argument("--policy", choices=("clamp", "skip"), default="clamp")
    p.add_argument("--gt", type=_geotransform)
    p.add_argument("-o", "--output", type=Path, required=True)
    p.set_defaults(func=cmd_samples)

    p = sub.add_parser("evaluate", help="IoU modes and per-object report")
    p.add_argument("--pred-classes", type=Path, required=True)
    p.add_argument("--gt-instances", type=Path, required=True)
    p.add_argument("--pred-instances", type=Path)
    p.add_argument("--tau-correct", type=float, default=0.5)
    p.add_argument("--tau-partial", type=float, default=0.1)
    p.add_argument("-o", "--output", type=Path)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="synthetic test scene")
    p.add_argument("spec", type=Path, nargs="?")
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--seed", type=int)
    p.add_argument("--gt", type=_geotransform)
    p.add_argument("-o", "--output", type=Path, required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as err:
        print(f"cityseg: usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (ValidationError, ContractViolation) as err:
        print(f"cityseg: error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (TileIOError, OSError) as err:
        print(f"cityseg: I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    except IndexError as err:
        print(f"cityseg: error: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
