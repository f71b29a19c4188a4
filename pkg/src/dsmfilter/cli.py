"""Command-line entry point: ``dsmfilter <command> [options]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import groundtruth as gt
from .baseline import BaselineParams, baseline_filter
from .config import Config, load_config, save_config
from .dataset import Region, SceneArea, grid_samples
from .inference import ensemble_dsm, ensemble_masks, predict_tiled
from .raster import HeightMap, Metrics, RasterError, evaluate, load_labels, load_raster, save_raster
from .synthcity import generate_scene
from .trainer import NetworkPredictor, load_checkpoint, run_ablation, train

logger = logging.getLogger("dsmfilter")

SCENE_FILES = {"stereo": "stereo.tif", "target": "target.tif", "roof": "roof.tif"}


class CommandError(Exception):
    """A user-facing failure; reported without a traceback."""


def _config(args) -> Config:
    cfg = load_config(args.config) if args.config else Config()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_metrics(metrics: Metrics, path: Path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "value", "unit"])
        for name, value, unit in metrics.rows():
            w.writerow([name, repr(float(value)), unit])


def print_metrics(metrics: Metrics):
    for name, value, unit in metrics.rows():
        print(f"{name:>6}  {value:10.4f}  {unit}")


def _load_scene(data: Path):
    missing = [n for n in SCENE_FILES.values() if not (data / n).exists()]
    if missing:
        raise CommandError(f"{data} lacks {', '.join(missing)}; run `dsmfilter synth` first")
    return (load_raster(data / SCENE_FILES["stereo"]), load_raster(data / SCENE_FILES["target"]),
            load_labels(data / SCENE_FILES["roof"]))


def _crop(m, region: Region):
    sl = (slice(region.row, region.row + region.rows), slice(region.col, region.col + region.cols))
    if isinstance(m, HeightMap):
        x0, y0 = m.origin
        origin = (x0 + region.col * m.gsd, y0 - region.row * m.gsd)
        return HeightMap(m.values[sl], m.gsd, m.nodata, origin)
    return type(m)(m.labels[sl], m.gsd, (m.origin[0] + region.col * m.gsd, m.origin[1] - region.row * m.gsd))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args, cfg: Config) -> int:
    out = _out_dir(args)
    scene = generate_scene(cfg.scene)
    save_raster(scene.stereo, out / SCENE_FILES["stereo"])
    save_raster(scene.target, out / SCENE_FILES["target"])
    save_raster(scene.roof, out / SCENE_FILES["roof"])
    save_raster(scene.dem, out / "dem.tif")
    gt.save_polygons(scene.polygons, out / "polygons.json")
    save_config(cfg, out / "config.yaml")
    print(f"wrote scene {cfg.scene.rows}x{cfg.scene.cols} with {len(scene.buildings)} buildings to {out}")
    return 0


def cmd_make_groundtruth(args, cfg: Config) -> int:
    out = _out_dir(args)
    polys = gt.load_polygons(args.polygons)
    dem = load_raster(args.dem)
    grid = gt.GridSpec.of(dem)
    if args.grid is not None:
        rows, cols, gsd, ox, oy = args.grid
        grid = gt.GridSpec(int(rows), int(cols), gsd, ox, oy)
    threshold = cfg.scene.slope_threshold if args.slope_threshold is None else args.slope_threshold
    target, footprint = gt.rasterize_target_dsm(gt.triangulate_roofs(polys), dem, grid)
    roof = gt.classify_roofs(target, footprint, threshold)
    save_raster(target, out / "target.tif")
    save_raster(roof, out / "roof.tif")
    print(f"rasterized {len(polys)} roof polygons onto a {grid.rows}x{grid.cols} grid")
    return 0


def _areas(cfg: Config, data: Path):
    stereo, target, roof = _load_scene(data)
    cfg.split.check_extent(stereo.rows, stereo.cols)
    train_area = SceneArea.from_maps(stereo, target, roof, cfg.split.train)
    val = grid_samples(SceneArea.from_maps(stereo, target, roof, cfg.split.val), cfg.train.patch_size)
    if not val:
        raise CommandError("validation region holds no full patch")
    return train_area, val


def cmd_train(args, cfg: Config) -> int:
    out = _out_dir(args)
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    save_config(cfg, out / "config.yaml")
    train_area, val = _areas(cfg, Path(args.data))
    run = train(cfg.train, train_area, val, out, progress=True)
    print(f"best epoch {run.best_epoch} val rmse {run.best_rmse:.4f} m; checkpoints in {out / 'checkpoints'}")
    return 0


def cmd_ablate(args, cfg: Config) -> int:
    out = _out_dir(args)
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    save_config(cfg, out / "config.yaml")
    train_area, val = _areas(cfg, Path(args.data))
    table = run_ablation(cfg.train, train_area, val, out)
    print(f"{'objectives':<22}{'weighting':<10}{'best_epoch':>11}{'rmse':>10}")
    for row in table:
        print(f"{row['objectives']:<22}{row['weighting']:<10}{row['best_epoch']:>11}{row['best_rmse']:>10.4f}")
    return 0


def resolve_checkpoint(path) -> Path:
    """A checkpoint file, or a run directory whose ``best.json`` names one."""
    path = Path(path)
    if path.is_dir():
        best = path / "best.json"
        if not best.exists():
            raise CommandError(f"{path} has no best.json")
        return path / "checkpoints" / json.loads(best.read_text())["checkpoint"]
    if not path.exists():
        raise CommandError(f"checkpoint not found: {path}")
    return path


def cmd_infer(args, cfg: Config) -> int:
    out = _out_dir(args)
    dsm = load_raster(args.input)
    patch = args.patch or cfg.infer.patch
    stride = args.stride or cfg.infer.stride
    for k, ck in enumerate(args.checkpoint):
        bundle, _, meta = load_checkpoint(resolve_checkpoint(ck))
        heights, mask = predict_tiled(NetworkPredictor(bundle.generator, cfg.infer.batch_size), dsm,
                                      patch, stride, cfg.infer.batch_size)
        suffix = "" if len(args.checkpoint) == 1 else f"_{k}"
        save_raster(heights, out / f"dsm{suffix}.tif")
        if mask is not None:
            save_raster(mask, out / f"roof{suffix}.tif")
        print(f"{ck}: epoch {meta['epoch']} -> {out / f'dsm{suffix}.tif'}")
    return 0


def cmd_ensemble(args, cfg: Config) -> int:
    out = _out_dir(args)
    if not args.dsm and not args.masks:
        raise CommandError("give --dsm and/or --masks")
    if args.dsm:
        save_raster(ensemble_dsm([load_raster(p) for p in args.dsm]), out / "dsm.tif")
    if args.masks:
        save_raster(ensemble_masks([load_labels(p) for p in args.masks]), out / "roof.tif")
    print(f"fused {len(args.dsm or [])} height maps and {len(args.masks or [])} masks into {out}")
    return 0


def cmd_baseline(args, cfg: Config) -> int:
    out = _out_dir(args)
    p = cfg.baseline
    params = BaselineParams(
        args.variance_window if args.variance_window is not None else p.variance_window,
        args.variance_threshold if args.variance_threshold is not None else p.variance_threshold,
        args.open_radius if args.open_radius is not None else p.open_radius,
        args.close_radius if args.close_radius is not None else p.close_radius,
        args.fill_window if args.fill_window is not None else p.fill_window,
    )
    save_raster(baseline_filter(load_raster(args.input), params), out / "dsm.tif")
    print(f"filtered with {params}")
    return 0


def cmd_evaluate(args, cfg: Config) -> int:
    out = _out_dir(args)
    pred, target = load_raster(args.pred), load_raster(args.target)
    pred_mask = load_labels(args.pred_mask) if args.pred_mask else None
    target_mask = load_labels(args.target_mask) if args.target_mask else None
    if args.split is not None:
        region = getattr(cfg.split, args.split)
        pred, target = _crop(pred, region), _crop(target, region)
        if pred_mask is not None and target_mask is not None:
            pred_mask, target_mask = _crop(pred_mask, region), _crop(target_mask, region)
    metrics = evaluate(pred, target, pred_mask, target_mask)
    print_metrics(metrics)
    write_metrics(metrics, out / "metrics.csv")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "make-groundtruth": cmd_make_groundtruth,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "infer": cmd_infer,
    "ensemble": cmd_ensemble,
    "baseline": cmd_baseline,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--seed", type=int, help="overrides scene and training seeds")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dsmfilter", description="Stereo DSM refinement toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    sub.add_parser("synth", parents=[common], help="generate a synthetic scene")

    p = sub.add_parser("make-groundtruth", parents=[common], help="rasterize roof polygons over a DEM")
    p.add_argument("--polygons", required=True)
    p.add_argument("--dem", required=True)
    p.add_argument("--grid", nargs=5, type=float, metavar=("ROWS", "COLS", "GSD", "ORIGIN_X", "ORIGIN_Y"),
                   help="target grid; defaults to the DEM grid")
    p.add_argument("--slope-threshold", type=float)

    for name, text in (("train", "train one model"), ("ablate", "train the objective/weighting ablation")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--data", required=True, help="directory written by `synth`")
        p.add_argument("--epochs", type=int)

    p = sub.add_parser("infer", parents=[common], help="tiled prediction over a raster")
    p.add_argument("--checkpoint", nargs="+", required=True, help="checkpoint files or run directories")
    p.add_argument("--input", required=True)
    p.add_argument("--patch", type=int)
    p.add_argument("--stride", type=int)

    p = sub.add_parser("ensemble", parents=[common], help="fuse predictions")
    p.add_argument("--dsm", nargs="+")
    p.add_argument("--masks", nargs="+")

    p = sub.add_parser("baseline", parents=[common], help="geometric vegetation filter")
    p.add_argument("--input", required=True)
    p.add_argument("--variance-window", type=int)
    p.add_argument("--variance-threshold", type=float)
    p.add_argument("--open-radius", type=int)
    p.add_argument("--close-radius", type=int)
    p.add_argument("--fill-window", type=int)

    p = sub.add_parser("evaluate", parents=[common], help="RMSE/MAE/mIoU of a prediction")
    p.add_argument("--pred", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--pred-mask")
    p.add_argument("--target-mask")
    p.add_argument("--split", choices=("train", "val", "test"), help="restrict to a split region")
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args, _config(args))
    except (CommandError, RasterError, gt.PolygonError, ValueError, KeyError, OSError) as e:
        print(f"dsmfilter {args.command}: error: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
