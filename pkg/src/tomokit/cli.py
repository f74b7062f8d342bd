#!/usr/bin/env python3
import argparse
import csv
import logging
import os
import sys
from typing import List, Optional, Sequence

# Import version from dedicated module to avoid circular imports
from .version import __version__
from .config import RunConfig, dump_config, load_config
from .container import (read_checkpoint, read_dataset, read_split, read_volumes, select_records,
                        write_volumes)
from .errors import ConfigError, ContainerError, TomokitError
from .utils import configure_logging, resolve_threads, write_manifest

logger = logging.getLogger("tomokit")

EXIT_OK = 0
EXIT_IO = 3
EXIT_CONFIG = 4
EXIT_RUNTIME = 5
EXIT_CLAIM = 6

SPLITS = ("train", "val", "test", "all")


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration (defaults when omitted)")
    common.add_argument("--seed", type=int, help="Override the simulation and training seeds")
    common.add_argument("--threads", type=int, help="Worker cap (else TOMOKIT_THREADS, else CPU count)")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="count", default=0, help="More logging (debug)")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="Warnings and errors only")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(
        prog="tomokit",
        description="Simulate, reconstruct and evaluate multi-baseline SAR tomography",
        formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"tomokit {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("simulate", parents=[common], formatter_class=fmt,
                       help="Generate a synthetic dataset (.tsrd) with a train/val/test split")
    p.add_argument("--out", required=True, help="Dataset path (.tsrd)")
    p.add_argument("--catalog", help="Read scenes from this JSON catalog instead of drawing them")
    p.add_argument("--save-catalog", help="Also write the scene catalog as JSON")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("pretrain", parents=[common], formatter_class=fmt,
                       help="Stage 1: pre-train the pre-imaging network")
    p.add_argument("--data", required=True, help="Dataset path (.tsrd)")
    p.add_argument("--out-dir", required=True, help="Directory for checkpoints and the loss curve")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", parents=[common], formatter_class=fmt,
                       help="Stage 2: train the full network end to end")
    p.add_argument("--data", required=True, help="Dataset path (.tsrd)")
    p.add_argument("--init", help="Stage-1 checkpoint (.tswt) to start from")
    p.add_argument("--out-dir", required=True, help="Directory for checkpoints and the loss curve")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", parents=[common], formatter_class=fmt,
                       help="Reconstruct reflectivity volumes (.tsrv) of dataset scenes")
    p.add_argument("--in", dest="data", required=True, help="Dataset path (.tsrd)")
    p.add_argument("--method", choices=("fista", "ista", "unfolding", "proposed"), default="fista")
    p.add_argument("--checkpoint", help="Trained checkpoint for the network methods")
    p.add_argument("--split", choices=SPLITS, default="all", help="Scenes to reconstruct")
    p.add_argument("--out", help="Volume file (default: <dataset>.<method>.tsrv)")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("evaluate", parents=[common], formatter_class=fmt,
                       help="Score stored volumes against the ground-truth point clouds")
    p.add_argument("--data", required=True, help="Dataset path (.tsrd)")
    p.add_argument("--volumes", required=True, help="Volume file (.tsrv) named by scene")
    p.add_argument("--out", help="Metrics CSV (default: next to the volume file)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", parents=[common], formatter_class=fmt,
                       help="Per-scene completeness/accuracy table for several methods")
    p.add_argument("--data", required=True, help="Dataset path (.tsrd)")
    p.add_argument("--checkpoint", help="Trained checkpoint for the network methods")
    p.add_argument("--methods", default="fista,proposed", help="Comma-separated methods")
    p.add_argument("--split", choices=SPLITS, default="test", help="Scenes to compare on")
    p.add_argument("--out-dir", required=True, help="Directory for comparison.csv and comparison.txt")
    p.add_argument("--check", action="store_true",
                   help="Exit 6 unless proposed beats fista on completeness within the accuracy slack")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("export", parents=[common], formatter_class=fmt,
                       help="Write a volume or point cloud as .xyz text or PNG slices")
    p.add_argument("--data", required=True, help="Dataset path (.tsrd), source of the geometry")
    p.add_argument("--volumes", help="Volume file (.tsrv); the ground-truth cloud is exported when omitted")
    p.add_argument("--name", help="Scene name (default: the first)")
    p.add_argument("--format", choices=("xyz", "png"), default="xyz")
    p.add_argument("--orientation", choices=("AE", "RE"), default="AE", help="Slice direction for PNG")
    p.add_argument("--max-image-size", type=int, default=1024, help="Maximum PNG dimension in pixels")
    p.add_argument("--out", required=True, help="Output .xyz file, or directory for PNG slices")
    p.set_defaults(func=cmd_export)
    return parser


# --- helpers ------------------------------------------------------------------

def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _progress(args) -> bool:
    return not args.quiet and sys.stderr.isatty()


def _output_dir(path: str) -> str:
    return os.path.dirname(os.path.abspath(path))


def _load_dataset(path: str):
    records = read_dataset(path)
    if not records:
        raise ContainerError(f"{path} holds no scenes")
    geometry_ids = {r.geometry.identifier for r in records}
    if len(geometry_ids) > 1:
        raise ContainerError(f"{path} mixes {len(geometry_ids)} acquisition geometries")
    return records, read_split(path, len(records))


def _indices(split, which: str, count: int) -> List[int]:
    if which == "all":
        return list(range(count))
    indices = split.get(which, [])
    if not indices:
        raise ContainerError(f"the '{which}' split is empty")
    return indices


def build_model(cfg: RunConfig, geom):
    """Fresh network for a geometry from the [network] section."""
    from .geometry import build_steering_matrix
    from .refine import TomoNet

    net = cfg.network
    return TomoNet.create(build_steering_matrix(geom), channels=net.channels, K=net.blocks,
                          variant=net.prenet_variant, mu0=net.mu0, theta0=net.theta0,
                          eps=net.smoothing_eps, merge_strategy=net.merge, seed=cfg.training.seed)


def load_model(cfg: RunConfig, geom, path: str, require_refiners: bool = True):
    model = build_model(cfg, geom)
    model.load_tensors(read_checkpoint(path).tensors, require_refiners=require_refiners)
    logger.info("loaded checkpoint %s", path)
    return model


# --- subcommands --------------------------------------------------------------

def cmd_simulate(args, cfg: RunConfig) -> int:
    from .scenes import random_catalog, scenes_from_json, scenes_to_json
    from .simulator import generate_dataset

    geom = cfg.geometry.to_geometry()
    sim = cfg.simulation
    if args.catalog:
        try:
            with open(args.catalog, "r", encoding="utf-8") as f:
                catalog = scenes_from_json(f.read())
        except OSError as e:
            raise ContainerError(f"cannot read catalog {args.catalog}: {e}") from e
    else:
        top = geom.elevation_origin + geom.elevation_bins * geom.elevation_spacing
        catalog = random_catalog(sim.scenes, (sim.ranges, sim.azimuths),
                                 (geom.range_spacing, geom.azimuth_spacing), geom.incidence_deg,
                                 sim.seed, sim.max_buildings, (sim.min_height, sim.max_height),
                                 max_elevation=top)
    if args.save_catalog:
        with open(args.save_catalog, "w", encoding="utf-8") as f:
            f.write(scenes_to_json(catalog))

    records = generate_dataset(catalog, geom, sim.snr_db, sim.seed, args.out, sim.density, args.threads)
    inputs = [args.catalog] if args.catalog else []
    write_manifest(_output_dir(args.out), "simulate", dump_config(cfg), inputs,
                   {"dataset": os.path.abspath(args.out), "scenes": len(records)})
    print(f"Simulated {len(records)} scenes. Dataset saved to {args.out}")
    return EXIT_OK


def cmd_pretrain(args, cfg: RunConfig) -> int:
    from .prenet import prenet_init_from_geometry
    from .geometry import build_steering_matrix
    from .training import train_stage1

    records, split = _load_dataset(args.data)
    net = cfg.network
    prenet = prenet_init_from_geometry(build_steering_matrix(records[0].geometry), net.mu0, net.theta0,
                                       net.blocks, net.prenet_variant, net.smoothing_eps)
    result = train_stage1(records, split, prenet, cfg.training, args.out_dir, _progress(args))
    write_manifest(args.out_dir, "pretrain", dump_config(cfg), [args.data],
                   {"best_epoch": result.best_epoch, "best_loss": result.best_loss})
    print(f"Stage 1 finished: best epoch {result.best_epoch} (loss {result.best_loss:.6g}). "
          f"Checkpoints saved to {args.out_dir}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    from .training import train_stage2

    records, split = _load_dataset(args.data)
    geom = records[0].geometry
    if args.init:
        model = load_model(cfg, geom, args.init, require_refiners=False)
    else:
        logger.warning("no stage-1 checkpoint given; the pre-imaging network starts from its ISTA init")
        model = build_model(cfg, geom)
    result = train_stage2(records, split, model, cfg.training, args.out_dir, _progress(args))
    inputs = [args.data] + ([args.init] if args.init else [])
    write_manifest(args.out_dir, "train", dump_config(cfg), inputs,
                   {"best_epoch": result.best_epoch, "best_loss": result.best_loss})
    print(f"Stage 2 finished: best epoch {result.best_epoch} (loss {result.best_loss:.6g}). "
          f"Checkpoints saved to {args.out_dir}")
    return EXIT_OK


def cmd_reconstruct(args, cfg: RunConfig) -> int:
    from .evaluation import NETWORK_METHODS, reconstruct_record

    records, split = _load_dataset(args.data)
    selected = select_records(records, _indices(split, args.split, len(records)))
    model = None
    if args.method in NETWORK_METHODS:
        if not args.checkpoint:
            raise ContainerError(f"--checkpoint is required for method '{args.method}'")
        model = load_model(cfg, records[0].geometry, args.checkpoint,
                           require_refiners=args.method == "proposed")
    solver = cfg.solver.to_solver_config(args.method if args.method in ("fista", "ista") else None)
    out = args.out or f"{os.path.splitext(args.data)[0]}.{args.method}.tsrv"
    volumes = {}
    for record in selected:
        volumes[record.name] = reconstruct_record(record, args.method, model, solver, args.threads).data
        logger.info("reconstructed %s with %s", record.name, args.method)
    write_volumes(out, volumes)
    inputs = [args.data] + ([args.checkpoint] if args.checkpoint else [])
    write_manifest(_output_dir(out), "reconstruct", dump_config(cfg), inputs,
                   {"method": args.method, "volumes": os.path.abspath(out)})
    print(f"Reconstructed {len(volumes)} scenes with {args.method}. Volumes saved to {out}")
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig) -> int:
    from .evaluation import evaluate_volume

    records, _ = _load_dataset(args.data)
    by_name = {r.name: r for r in records}
    volumes = read_volumes(args.volumes)
    ev = cfg.evaluation
    out = args.out or f"{os.path.splitext(args.volumes)[0]}.metrics.csv"
    rows = []
    for name, volume in volumes.items():
        if name not in by_name:
            raise ContainerError(f"volume '{name}' has no scene in {args.data}")
        report = evaluate_volume(volume.astype("float64"), by_name[name], ev.tau_rel, ev.statistic)
        rows.append([name, repr(report.completeness), repr(report.accuracy),
                     report.n_reconstructed, report.n_truth])
        print(f"{name}: completeness {report.completeness:.4f} m, accuracy {report.accuracy:.4f} m")
    try:
        with open(out, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["scene", "completeness", "accuracy", "n_reconstructed", "n_truth"])
            writer.writerows(rows)
    except OSError as e:
        raise ContainerError(f"cannot write {out}: {e}") from e
    write_manifest(_output_dir(out), "evaluate", dump_config(cfg), [args.data, args.volumes])
    print(f"Metrics saved to {out}")
    return EXIT_OK


def cmd_compare(args, cfg: RunConfig) -> int:
    from .evaluation import METHODS, NETWORK_METHODS, check_ordering, compare_methods

    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ConfigError(f"unknown method(s) {unknown}, expected some of {METHODS}")
    if args.check and not {"proposed", "fista"} <= set(methods):
        raise ConfigError("--check needs both 'proposed' and 'fista' in --methods")
    records, split = _load_dataset(args.data)
    model = None
    if any(m in NETWORK_METHODS for m in methods):
        if not args.checkpoint:
            raise ContainerError(f"--checkpoint is required for methods {list(NETWORK_METHODS)}")
        model = load_model(cfg, records[0].geometry, args.checkpoint,
                           require_refiners="proposed" in methods)
    ev = cfg.evaluation
    table = compare_methods(records, _indices(split, args.split, len(records)), methods, model,
                            cfg.solver.to_solver_config(), ev.tau_rel, ev.statistic, args.out_dir,
                            args.threads)
    inputs = [args.data] + ([args.checkpoint] if args.checkpoint else [])
    write_manifest(args.out_dir, "compare", dump_config(cfg), inputs, {"methods": methods})
    print(table.to_text(), end="")
    if args.check:
        ok, message = check_ordering(table, accuracy_slack=ev.accuracy_slack)
        print(("Claim holds: " if ok else "Claim failed: ") + message)
        if not ok:
            return EXIT_CLAIM
    return EXIT_OK


def cmd_export(args, cfg: RunConfig) -> int:
    from .exporters import export_slices, export_volume_xyz, write_xyz

    records, _ = _load_dataset(args.data)
    by_name = {r.name: r for r in records}
    name = args.name or records[0].name
    if name not in by_name:
        raise ContainerError(f"no scene '{name}' in {args.data}")
    record = by_name[name]
    if args.volumes:
        volumes = read_volumes(args.volumes)
        if name not in volumes:
            raise ContainerError(f"no volume '{name}' in {args.volumes}")
        volume = volumes[name].astype("float64")
    else:
        volume = record.truth.data

    if args.format == "png":
        paths = export_slices(volume, args.out, args.orientation, max_size=args.max_image_size, prefix=name)
        print(f"Exported {len(paths)} {args.orientation} slices to {args.out}")
    elif args.volumes:
        count = export_volume_xyz(args.out, volume, record.geometry, cfg.evaluation.tau_rel)
        print(f"Exported {count} points to {args.out}")
    else:
        count = write_xyz(args.out, record.cloud)
        print(f"Exported {count} ground-truth points to {args.out}")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point for the tomokit command line."""
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(-1 if args.quiet else args.verbose)
    if args.threads is not None and args.threads < 1:
        print("Error: --threads must be >= 1.", file=sys.stderr)
        return EXIT_CONFIG
    args.threads = resolve_threads(args.threads)

    try:
        cfg = _load_run_config(args)
        return args.func(args, cfg)
    except ConfigError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ContainerError, OSError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_IO
    except (TomokitError, ValueError, FloatingPointError, MemoryError) as e:
        print(f"Error: {e}", file=sys.stderr)
        logger.debug("details", exc_info=True)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
