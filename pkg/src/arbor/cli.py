"""Command-line entry point: ``arbor <subcommand> ...``.

Exit codes: 0 success, 1 degenerate result under ``--strict`` (or a failed
optimisation), 2 invalid input.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from pathlib import Path

from . import DegenerateResult, InvalidArgument, UnsupportedOperation, __version__
from . import io
from .distill import ReconstructionError
from .pipeline import (PipelineConfig, run_ablate, run_curate, run_evaluate, run_grow, run_measure,
                       run_reconstruct)
from .phenotype import sun_from_angles

log = logging.getLogger("arbor")

EXIT_OK, EXIT_DEGENERATE, EXIT_INVALID = 0, 1, 2


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _float_list(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="pipeline config JSON")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--strict", action="store_true", help="exit 1 on degenerate results")
    common.add_argument("--jobs", type=_positive_int, help="worker processes (default: $ARBOR_JOBS or 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="arbor", description="Single-image tree reconstruction and growth.")
    p.add_argument("--version", action="version", version=f"arbor {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("defaults", parents=[common], help="print the effective config as JSON")
    s.add_argument("--out", type=Path)

    s = sub.add_parser("curate", parents=[common], help="score and filter images by sharpness")
    s.add_argument("input", type=Path, help="directory of images")
    s.add_argument("--out", type=Path, required=True, help="manifest JSON")
    s.add_argument("--threshold", type=float)
    s.add_argument("--patch-size", type=int)

    s = sub.add_parser("reconstruct", parents=[common], help="fit the envelope grid to one image")
    s.add_argument("image", type=Path)
    s.add_argument("--mask", type=Path, required=True)
    s.add_argument("--genus")
    s.add_argument("--iterations", type=_positive_int)
    s.add_argument("--out", type=Path, required=True, help="output directory")

    for name, hlp in (("grow", "grow a tree in an envelope"), ("simulate", "growth snapshots over time")):
        s = sub.add_parser(name, parents=[common], help=hlp)
        s.add_argument("envelope", type=Path, help="grid checkpoint (grid.bin) or occupancy RLE")
        s.add_argument("--genus")
        s.add_argument("--out", type=Path, required=True, help="output directory")
        s.add_argument("--snapshots", type=_float_list, default=None, help="comma-separated steps")

    s = sub.add_parser("measure", parents=[common], help="phenotype report for a skeleton")
    s.add_argument("skeleton", type=Path)
    s.add_argument("--leaves", type=Path)
    s.add_argument("--sun", type=_float_list, help="direction vector x,y,z (z < 0)")
    s.add_argument("--sun-angles", type=_float_list, help="azimuth,elevation in degrees")
    s.add_argument("--shadow-pgm", type=Path)
    s.add_argument("--out", type=Path, required=True)

    s = sub.add_parser("evaluate", parents=[common], help="Chamfer and branch attributes per tree")
    s.add_argument("skeletons", type=Path, nargs="+")
    s.add_argument("--reference", type=Path, action="append", default=[], help="reference PLY (repeatable)")
    s.add_argument("--raw", action="store_true", help="skip Chamfer normalisation")
    s.add_argument("--n-points", type=_positive_int)
    s.add_argument("--out", type=Path, required=True, help=".json (list) or .jsonl (rows)")

    s = sub.add_parser("ablate", parents=[common], help="sweep the prior weight ratio")
    s.add_argument("--image", type=Path)
    s.add_argument("--mask", type=Path)
    s.add_argument("--genus")
    s.add_argument("--iterations", type=_positive_int)
    s.add_argument("--ratios", type=_float_list)
    s.add_argument("--out", type=Path, required=True)
    return p


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "genus", None):
        cfg.genus = args.genus
    if getattr(args, "iterations", None):
        cfg.recon.iterations = args.iterations
    if getattr(args, "threshold", None) is not None:
        cfg.curate.threshold = args.threshold
    if getattr(args, "patch_size", None) is not None:
        cfg.curate.patch_size = args.patch_size
    if getattr(args, "n_points", None):
        cfg.metrics.n_points = args.n_points
    if getattr(args, "raw", False):
        cfg.metrics.normalize = False
    cfg.validate()
    return cfg


def _inputs(args) -> list[Path]:
    vals = []
    for key in ("input", "image", "mask", "envelope", "skeleton", "leaves", "config"):
        v = getattr(args, key, None)
        if v is not None:
            vals.append(v)
    vals += list(getattr(args, "skeletons", []) or []) + list(getattr(args, "reference", []) or [])
    return vals


def _check_paths(args) -> None:
    for p in _inputs(args):
        if p != getattr(args, "input", None) and not p.is_file():
            raise InvalidArgument(f"input file not found: {p}")
    out = getattr(args, "out", None)
    if out is None:
        return
    outs = {out.resolve()}
    if getattr(args, "shadow_pgm", None):
        outs.add(args.shadow_pgm.resolve())
    for p in _inputs(args):
        rp = p.resolve()
        if rp in outs or (args.command in ("reconstruct", "grow", "simulate") and rp.parent == out.resolve()
                          and rp.name in {"grid.bin", "occupancy.rle", "manifest.json", "skeleton.json"}):
            raise InvalidArgument(f"output would overwrite input {p}")


def _jobs(args) -> int:
    if args.jobs:
        return args.jobs
    env = os.environ.get("ARBOR_JOBS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise InvalidArgument(f"ARBOR_JOBS must be an integer, got {env!r}")
    return 1


def _dispatch(args, cfg: PipelineConfig) -> None:
    cmd = args.command
    if cmd == "defaults":
        text = io.dumps_json(cfg.to_dict())
        if args.out:
            io.atomic_write_text(args.out, text)
        else:
            sys.stdout.write(text)
    elif cmd == "curate":
        m = run_curate(args.input, args.out, cfg, _jobs(args))
        log.info("kept %d, rejected %d", len(m["kept"]), len(m["rejected"]))
    elif cmd == "reconstruct":
        if args.mask is None:
            raise InvalidArgument("a mask is required")
        m = run_reconstruct(args.image, args.mask, args.out, cfg)
        log.info("front-view IoU %.4f", m["front_iou"])
    elif cmd in ("grow", "simulate"):
        snaps = [int(s) for s in args.snapshots] if args.snapshots is not None else None
        if cmd == "simulate" and not (snaps or cfg.growth.snapshots):
            raise InvalidArgument("simulate needs --snapshots or growth.snapshots in the config")
        s = run_grow(args.envelope, args.out, cfg, snapshots=snaps)
        log.info("%d nodes, %d/%d markers consumed", s["nodes"], s["markers_consumed"], s["markers"])
    elif cmd == "measure":
        sun = None
        if args.sun and args.sun_angles:
            raise InvalidArgument("give --sun or --sun-angles, not both")
        if args.sun:
            if len(args.sun) != 3:
                raise InvalidArgument("--sun needs three components")
            sun = args.sun
        elif args.sun_angles:
            if len(args.sun_angles) != 2:
                raise InvalidArgument("--sun-angles needs azimuth,elevation")
            sun = sun_from_angles(*args.sun_angles)
        run_measure(args.skeleton, args.out, cfg, args.leaves, sun, args.shadow_pgm)
    elif cmd == "evaluate":
        run_evaluate(args.skeletons, args.reference, args.out, cfg, _jobs(args))
    elif cmd == "ablate":
        if (args.image is None) != (args.mask is None):
            raise InvalidArgument("--image and --mask go together")
        kw = {"ratios": tuple(args.ratios)} if args.ratios else {}
        rows = run_ablate(args.out, cfg, args.image, args.mask, **kw)
        for r in rows:
            log.info("ratio %g: front IoU %.4f, novel IoU %.4f", r["ratio"], r["front_iou"], r["novel_view_iou"])


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        _check_paths(args)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            _dispatch(args, cfg)
    except (InvalidArgument, UnsupportedOperation, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"arbor: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ReconstructionError as exc:
        print(f"arbor: optimisation failed: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    degenerate = [w for w in caught if issubclass(w.category, DegenerateResult)]
    for w in caught:
        print(f"arbor: warning: {w.message}", file=sys.stderr)
    if degenerate and args.strict:
        return EXIT_DEGENERATE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
