"""Command line front-end.

Subcommands:
  run            process one frame, optionally dump the feature matrix
  bench          time the windowed sampling path against the global baseline
  dump-maps      write the synchronized maps (or an encoded level) to disk
  inspect-calib  parse a calibration file and print the matrices

Exit codes: 0 success, 1 malformed frame data, 2 bad configuration or
usage, 3 filesystem errors.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np
from PIL import UnidentifiedImageError

from .encoder import LevelParams, bootstrap_state, dump_level, encode_level
from .errors import CalibrationError, ConfigError, VelodyneFormatError
from .geometry import parse_calibration, read_velodyne, crop_points
from .maps import build_synced_maps, dump_maps, occupancy
from .params import Dense, save_params
from .pipeline import (
    FrameBundle,
    PipelineConfig,
    bench_sampling,
    build_parameters,
    dump_features,
    run_frame,
)

__all__ = ["main"]


def _add_frame_args(ap: argparse.ArgumentParser) -> None:
    ap.add_argument("--frame-dir", required=True, help="directory with velodyne/ image_2/ calib/")
    ap.add_argument("--frame-id", required=True, help="frame identifier, e.g. 000000")


def _add_config_args(ap: argparse.ArgumentParser) -> None:
    ap.add_argument("--config", help="key = value configuration file")
    ap.add_argument("--preset", help="spherical grid preset, e.g. 40x275")
    ap.add_argument("--fusion", choices=("none", "licamfuse", "bilicamfuse"))
    ap.add_argument("--seed", type=int, help="parameter seed")
    ap.add_argument("--params", help="parameter container to load instead of seeding")
    ap.add_argument("--workers", type=int, help="worker threads (0 = serial)")


def _config_from_args(args) -> PipelineConfig:
    overrides = {
        "preset": args.preset,
        "fusion": args.fusion,
        "seed": args.seed,
        "params": args.params,
        "workers": args.workers,
    }
    if args.config:
        return PipelineConfig.from_file(args.config, **overrides)
    merged = {k: v for k, v in overrides.items() if v is not None}
    return PipelineConfig._from_strings(merged)


def _cmd_run(args) -> int:
    cfg = _config_from_args(args)
    frame = FrameBundle.from_dir(args.frame_dir, args.frame_id)
    features, report = run_frame(cfg, frame)
    print(report.summary())
    if args.out:
        dump_features(features, args.out)
        print(f"wrote {features.shape[0]}x{features.shape[1]} features to {args.out}")
    if args.save_params:
        save_params(build_parameters(cfg), args.save_params)
        print(f"wrote parameters to {args.save_params}")
    return 0


def _cmd_bench(args) -> int:
    cfg = _config_from_args(args)
    frame = FrameBundle.from_dir(args.frame_dir, args.frame_id)
    report = bench_sampling(cfg, frame, repeats=args.repeats)
    print(report.summary())
    return 0


def _cmd_dump_maps(args) -> int:
    cfg = _config_from_args(args)
    frame = FrameBundle.from_dir(args.frame_dir, args.frame_id)
    calib = parse_calibration(open(frame.calib).read())
    points = crop_points(read_velodyne(frame.velodyne), cfg.crop)
    maps = build_synced_maps(points, calib, cfg.grid, cfg.image_size)
    if args.level == 0:
        dump_maps(maps, args.out)
        print(f"wrote {maps.height}x{maps.width} maps "
              f"(occupancy {occupancy(maps):.4f}) to {args.out}")
        return 0
    bank = build_parameters(cfg)
    state = bootstrap_state(maps, Dense.from_bank(bank, "lift"))
    for lvl in range(1, args.level + 1):
        state = encode_level(
            state, cfg.kernels[lvl - 1],
            LevelParams.from_bank(bank, f"enc{lvl}"), cfg.workers,
        )
    dump_level(state, args.out)
    print(f"wrote level {args.level} ({state.features.shape[0]} points, "
          f"width {state.width}) to {args.out}")
    return 0


def _cmd_inspect_calib(args) -> int:
    calib = parse_calibration(open(args.calib).read())
    with np.printoptions(precision=6, suppress=True):
        print("P2:")
        print(calib.cam_projection)
        print("R0_rect:")
        print(calib.rectification)
        print("Tr_velo_to_cam:")
        print(calib.lidar_to_cam)
        print("composed (P2 . R0 . Tr):")
        print(calib.composed)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lidarcam", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="process one frame")
    _add_frame_args(run)
    _add_config_args(run)
    run.add_argument("--out", help="write the feature matrix here")
    run.add_argument("--save-params", help="write the parameter bank here")
    run.set_defaults(func=_cmd_run)

    bench = sub.add_parser("bench", help="time sampling strategies")
    _add_frame_args(bench)
    _add_config_args(bench)
    bench.add_argument("--repeats", type=int, default=5)
    bench.set_defaults(func=_cmd_bench)

    dump = sub.add_parser("dump-maps", help="write synchronized maps or a level")
    _add_frame_args(dump)
    _add_config_args(dump)
    dump.add_argument("--out", required=True)
    dump.add_argument("--level", type=int, default=0, choices=range(5),
                      help="0 dumps the raw maps, 1-4 an encoded level")
    dump.set_defaults(func=_cmd_dump_maps)

    insp = sub.add_parser("inspect-calib", help="print calibration matrices")
    insp.add_argument("calib", help="calibration file")
    insp.set_defaults(func=_cmd_inspect_calib)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except (CalibrationError, VelodyneFormatError, UnidentifiedImageError) as exc:
        print(f"error: bad frame data: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
