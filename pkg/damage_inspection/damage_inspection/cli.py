#!/usr/bin/env python3
"""
Command-line surface
Subcommands: fixture, split, audit, prepare, fit, run, eval, import-labels.
Exit codes: 0 success, 1 usage error, 2 data error.
"""

import argparse
import glob
import logging
import os
import sys
from typing import Dict, List, Optional

from . import __version__
from .config import (DEFAULT_FOREST_SIZE, DEFAULT_MIN_INSTANCE_PIXELS, DEFAULT_PADDING_FRACTION,
                     DEFAULT_PATCH_SIDE, DEFAULT_TEST_FRACTION, DEFAULT_TREE_DEPTH, Settings, setup_logging)
from .core_model import (import_color_labels, load_manifest, load_palette, read_rgb, save_manifest, write_json,
                         write_mask)
from .dataset import (STATS_LAYERS, audit_collisions, balance_by_oversampling, balance_by_undersampling,
                      build_foreground_masks, class_pixel_stats, feature_rows, generate_fixture_dataset,
                      mask_background, prepare_defect_crops, prepare_surface_patches, read_feature_table,
                      split_dataset, write_feature_table)
from .errors import DataError, InspectionError, UsageError
from .metrics import write_report_json, write_table_csv
from .models import LabelStore, Stage, classifier_node, external_mask_node, oracle_node
from .pipeline import PipelineConfig, PipelineParams, evaluate_batch, run_batch
from .scene_generator import SceneParameters
from .shallow import cross_validate, fit_decision_tree, fit_naive_bayes, fit_random_forest, load_model, save_model

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class CliParser(argparse.ArgumentParser):
    """argparse that reports bad flags as UsageError instead of exiting."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def print_banner(title: str):
    print("=" * 60)
    print(f"🏗️  DAMAGE INSPECTION - {title}")
    print("=" * 60)


def print_summary(title: str, rows: Dict[str, object]):
    print("\n" + "=" * 60)
    print(f"📊 {title}")
    print("=" * 60)
    for key, value in rows.items():
        print(f"{key}: {value}")
    print("=" * 60)


def _fill(text: str):
    try:
        parts = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"fill must be R,G,B integers, got '{text}'") from None
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"fill must be R,G,B, got '{text}'")
    return parts


# ---------------------------------------------------------------------------
# Node bindings
# ---------------------------------------------------------------------------

def _parse_stage(name: str) -> Stage:
    try:
        return Stage(name)
    except ValueError:
        raise UsageError(f"unknown stage '{name}' (expected one of {[s.value for s in Stage]})") from None


def build_config(args, manifest) -> PipelineConfig:
    """Node per stage from --oracle-all, --external-dir and --node STAGE=SPEC (later flags win)."""
    store = LabelStore(manifest=manifest)
    specs: Dict[Stage, str] = {}
    if args.oracle_all:
        specs.update({s: "oracle" for s in Stage})
    if args.external_dir:
        specs.update({s: f"external:{args.external_dir}" for s in Stage if s.is_segmentation})
    for binding in args.node or []:
        if "=" not in binding:
            raise UsageError(f"--node expects STAGE=SPEC, got '{binding}'")
        stage, spec = binding.split("=", 1)
        specs[_parse_stage(stage)] = spec

    nodes = {}
    for stage, spec in specs.items():
        if spec == "oracle":
            nodes[stage] = oracle_node(stage, store)
        elif spec.startswith("external:"):
            nodes[stage] = external_mask_node(stage, spec[len("external:"):])
        elif spec.startswith("model:"):
            if stage is not Stage.DAMAGE:
                raise UsageError(f"model nodes only serve the damage stage, not '{stage.value}'")
            nodes[stage] = classifier_node(load_model(spec[len("model:"):]))
        else:
            raise UsageError(f"unknown node spec '{spec}' (oracle, external:DIR or model:PATH)")
    params = PipelineParams(padding_fraction=args.padding, patch_side=args.patch_side,
                            min_instance_pixels=args.min_instance_pixels, fill=args.fill,
                            mask_background=not args.no_mask_background)
    return PipelineConfig(nodes, params)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_fixture(args) -> int:
    params = SceneParameters(images=args.images, width=args.size, height=args.size, cell=args.cell,
                             defect_density=args.defect_density, collision_rate=args.collision_rate,
                             rotated_fraction=args.rotated_fraction)
    manifest = generate_fixture_dataset(params, args.seed, args.out)
    print_summary("FIXTURE", {"Images": len(manifest), "Manifest": os.path.join(args.out, "manifest.json")})
    return EXIT_OK


def cmd_split(args) -> int:
    train, test = split_dataset(load_manifest(args.manifest), args.test_fraction, args.seed)
    save_manifest(train, os.path.join(args.out, "train.json"))
    save_manifest(test, os.path.join(args.out, "test.json"))
    print_summary("SPLIT", {"Train": len(train), "Test": len(test)})
    return EXIT_OK


def cmd_audit(args) -> int:
    manifest = load_manifest(args.manifest)
    collisions = audit_collisions(manifest, args.jobs)
    write_json(os.path.join(args.out, "collisions.json"), collisions.to_dict())
    stats = {}
    for layer in STATS_LAYERS:
        if layer != "defects" and not all(e.has_layer(layer) for e in manifest):
            continue
        stats[layer] = class_pixel_stats(manifest, layer, args.jobs).to_dict()
    write_json(os.path.join(args.out, "pixel_stats.json"), stats)
    print_summary("COLLISION AUDIT", {key: n for key, n in collisions.to_dict()["collisions"].items()})
    return EXIT_OK


def cmd_prepare(args) -> int:
    manifest = load_manifest(args.manifest)
    if args.target == "task0":
        with_fg = build_foreground_masks(manifest, args.out, args.jobs)
        masked = mask_background(with_fg, args.out, args.fill, args.jobs)
        save_manifest(masked, os.path.join(args.out, "manifest.json"))
        rows = {"Foreground masks": len(with_fg)}
    elif args.target == "defects":
        table = prepare_defect_crops(manifest, args.out, args.padding, args.min_instance_pixels, args.jobs)
        rows = {f"Crops ({k})": v for k, v in sorted(table["defect"].value_counts().items())}
    elif args.target == "surfaces":
        table = prepare_surface_patches(manifest, args.out, args.patch_side, args.min_instance_pixels,
                                        not args.no_mask_background, args.jobs)
        rows = {f"Patches ({k})": v for k, v in sorted(table["state"].value_counts().items())}
    else:
        rows_ = feature_rows(manifest, args.min_instance_pixels, args.jobs)
        table = write_feature_table(rows_, os.path.join(args.out, "features.csv"))
        rows = {"Feature rows": len(table)}
    print_summary(f"PREPARE {args.target.upper()}", rows)
    return EXIT_OK


def _training_data(args) -> list:
    if bool(args.features) == bool(args.manifest):
        raise UsageError("fit needs exactly one of --features or --manifest")
    if args.features:
        data = read_feature_table(args.features)
    else:
        data = [row.features for row in feature_rows(load_manifest(args.manifest), args.min_instance_pixels,
                                                      args.jobs)]
    if args.balance != "none":
        if args.seed is None:
            raise UsageError("--balance needs --seed")
        balance = balance_by_undersampling if args.balance == "under" else balance_by_oversampling
        data = balance(data, args.seed)
    return data


def cmd_fit(args) -> int:
    if args.kind == "forest" and args.seed is None:
        raise UsageError("fit forest needs --seed")
    data = _training_data(args)
    if args.kind == "tree":
        params = {"max_depth": args.max_depth}
        model = fit_decision_tree(data, **params)
    elif args.kind == "forest":
        params = {"n_trees": args.trees, "seed": args.seed, "bootstrap": not args.no_bootstrap,
                  "max_features": args.max_features, "max_depth": None, "jobs": args.jobs}
        model = fit_random_forest(data, **params)
    else:
        params = {"normalized": args.normalized}
        model = fit_naive_bayes(data, **params)
    save_model(model, args.out)
    rows = {"Model": args.kind, "Training samples": len(data), "Saved to": args.out}
    if args.cv_folds:
        if args.seed is None:
            raise UsageError("--cv-folds needs --seed")
        result = cross_validate(args.kind, data, args.cv_folds, args.seed, **params)
        write_json(os.path.splitext(args.out)[0] + "_cv.json", result.to_dict())
        rows.update({"CV accuracy": f"{result.mean_average_accuracy:.4f}",
                     "CV macro F1": f"{result.mean_macro_f1:.4f}"})
    print_summary("FIT", rows)
    return EXIT_OK


def cmd_run(args) -> int:
    manifest = load_manifest(args.manifest)
    cfg = build_config(args, manifest)
    batch = run_batch(cfg, manifest, args.jobs, args.out)
    print_summary("RUN", {"Images": len(manifest), "Succeeded": batch.succeeded, "Failed": len(batch.failures)})
    for failure in batch.failures:
        print(f"❌ [{failure['stage']}] {failure['image_id']}: {failure['error']}")
    return EXIT_DATA if batch.failures else EXIT_OK


def cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    cfg = build_config(args, manifest)
    stages = [_parse_stage(s) for s in args.stages.split(",")] if args.stages else None
    evaluation = evaluate_batch(cfg, manifest, stages, args.jobs)
    write_report_json(evaluation.reports, os.path.join(args.out, "metrics.json"),
                      extra={"nodes": cfg.describe(), "failures": evaluation.failures})
    for key, report in evaluation.reports.items():
        write_table_csv(report, os.path.join(args.out, "tables", f"{key}.csv"))
    if args.plots:
        from .report_plots import ReportPlotter
        ReportPlotter(os.path.join(args.out, "plots")).plot_all(evaluation.reports)
    rows = {}
    for key, report in evaluation.reports.items():
        rows[key] = ", ".join(f"{name}={'n/a' if v is None else f'{v:.4f}'}" for name, v in report.headline().items())
    print_summary("EVALUATION", rows)
    for failure in evaluation.failures:
        print(f"❌ [{failure['stage']}] {failure['image_id']}: {failure['error']}")
    return EXIT_DATA if evaluation.failures else EXIT_OK


def cmd_import_labels(args) -> int:
    table, palette = load_palette(args.palette)
    paths = sorted(glob.glob(os.path.join(args.input, "*.png")))
    if not paths:
        raise DataError(f"no PNG labels in {args.input}")
    for path in paths:
        write_mask(os.path.join(args.out, os.path.basename(path)), import_color_labels(read_rgb(path), palette, table))
    print_summary("IMPORT LABELS", {"Table": table.name, "Labels": len(paths)})
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_pipeline_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--padding", type=float, default=DEFAULT_PADDING_FRACTION,
                        help="crop padding per side, fraction of the instance bbox")
    parser.add_argument("--patch-side", type=int, default=DEFAULT_PATCH_SIDE, help="warped patch edge in px")
    parser.add_argument("--min-instance-pixels", type=int, default=DEFAULT_MIN_INSTANCE_PIXELS,
                        help="smaller instances are not assessed")
    parser.add_argument("--fill", type=_fill, default=(0, 0, 0), help="background fill color R,G,B")
    parser.add_argument("--no-mask-background", action="store_true",
                        help="feed the raw image to the component stage")


def _add_node_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--node", action="append", metavar="STAGE=SPEC",
                        help="bind a stage: oracle, external:DIR or model:PATH (damage only); repeatable")
    parser.add_argument("--oracle-all", action="store_true", help="bind every stage to the ground-truth oracle")
    parser.add_argument("--external-dir", help="bind every segmentation stage to <DIR>/<stage>/<id>.png masks")


def build_parser() -> CliParser:
    settings = Settings.from_env()
    common = CliParser(add_help=False)
    common.add_argument("--jobs", type=int, default=settings.jobs, help="parallel images (default $SHM_JOBS or 1)")
    common.add_argument("--log-level", default=settings.log_level, help="DEBUG, INFO, WARNING or ERROR")
    common.add_argument("--log-file", help="also write the log to this file")

    parser = CliParser(prog="damage_inspection", description="Post-earthquake structural inspection toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("fixture", parents=[common], help="generate a miniature labeled dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--images", type=int, default=12)
    p.add_argument("--size", type=int, default=64, help="square image side in px")
    p.add_argument("--cell", type=int, default=16, help="layout cell side in px")
    p.add_argument("--defect-density", type=float, default=0.6)
    p.add_argument("--collision-rate", type=float, default=0.5)
    p.add_argument("--rotated-fraction", type=float, default=0.2)
    p.set_defaults(func=cmd_fixture)

    p = sub.add_parser("split", parents=[common], help="seeded train/test split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--test-fraction", type=float, default=DEFAULT_TEST_FRACTION)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("audit", parents=[common], help="label collisions and class-pixel statistics")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("prepare", parents=[common], help="derived training datasets")
    p.add_argument("target", choices=["task0", "defects", "surfaces", "features"])
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("fit", parents=[common], help="train and save a shallow damage-state model")
    p.add_argument("kind", choices=["tree", "forest", "nb"])
    p.add_argument("--features", help="feature table CSV from 'prepare features'")
    p.add_argument("--manifest", help="build the feature table from this manifest instead")
    p.add_argument("--out", required=True, help="model JSON path")
    p.add_argument("--seed", type=int)
    p.add_argument("--balance", choices=["none", "under", "over"], default="none")
    p.add_argument("--max-depth", type=int, default=DEFAULT_TREE_DEPTH)
    p.add_argument("--trees", type=int, default=DEFAULT_FOREST_SIZE)
    p.add_argument("--max-features", type=int,
                   help="features tried per forest split (default ceil(sqrt(d)), also with --no-bootstrap)")
    p.add_argument("--no-bootstrap", action="store_true", help="fit every tree on all samples")
    p.add_argument("--normalized", action="store_true", help="naive Bayes with min-max normalization")
    p.add_argument("--cv-folds", type=int, help="also report k-fold cross-validation")
    p.add_argument("--min-instance-pixels", type=int, default=DEFAULT_MIN_INSTANCE_PIXELS)
    p.set_defaults(func=cmd_fit)

    for name, func, text in (("run", cmd_run, "run the pipeline and write reports, masks and overlays"),
                             ("eval", cmd_eval, "evaluate every pipeline stage against ground truth")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--manifest", required=True)
        p.add_argument("--out", required=True)
        _add_node_flags(p)
        _add_pipeline_flags(p)
        if name == "eval":
            p.add_argument("--stages", help="comma-separated subset of stages")
            p.add_argument("--plots", action="store_true", help="write matplotlib figures")
        p.set_defaults(func=func)

    p = sub.add_parser("import-labels", parents=[common], help="re-code color-coded labels with a palette file")
    p.add_argument("--palette", required=True)
    p.add_argument("--input", required=True, help="directory of color-coded PNG labels")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_import_labels)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        setup_logging(args.log_level, args.log_file)
        print_banner(args.command.upper())
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except InspectionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        # file-system failures outside the package's own readers and writers (log file, globbing)
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
