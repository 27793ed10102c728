"""Batch command-line driver: ``tiltlens <command> ...``.

Exit status is 0 on success, 1 for usage errors, 2 for unreadable or
inconsistent data and 3 when a numerical step fails (no focus signal,
ambiguous correlation, degenerate geometry).
"""
from __future__ import annotations

import argparse
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import io
from .calibration import FocusSearch, autofocus_distance, estimate_tilt_angle, register_dataset
from .errors import (
    BandEdgeError,
    DegenerateGeometry,
    DomainError,
    IntegrityError,
    NoFocusSignal,
    ParseError,
    PeakAmbiguity,
)
from .field import Geometry, ShiftVector
from .forward import NoiseModel, bar_layout, linear_scan, simulate_dataset, simulation_shape, synth_object
from .metrics import REPORT_KEYS, common_region_center, compute_metrics, overlap_mask, truth_on_recon_grid
from .mosaic import stitch_grid
from .recon import ReconConfig, reconstruct

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
REPORT_SCHEMA = 1
TRUTH_PREFIX = "truth"
TRUTH_META = "truth_meta.txt"
DEFAULT_LINEWIDTHS = (1.5, 1.0, 0.78, 0.69)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _floats(text, n=None):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {text!r}")
    return vals


def _region(text):
    vals = _floats(text, 4)
    if any(v != int(v) for v in vals):
        raise argparse.ArgumentTypeError("region bounds are whole pixels")
    return tuple(int(v) for v in vals)


def _auto_shifts(text):
    vals = _floats(text, 2)
    if vals[0] < 1 or vals[0] != int(vals[0]):
        raise argparse.ArgumentTypeError("frame count must be a positive integer")
    return int(vals[0]), vals[1]


def _order(text):
    if text == "sequential" or (text.startswith("random:") and text[7:].isdigit()):
        return text
    raise argparse.ArgumentTypeError("order is 'sequential' or 'random:SEED'")


def _add_search(p):
    p.add_argument("--dmin", type=float, default=500.0, help="smallest candidate distance, µm")
    p.add_argument("--dmax", type=float, default=1100.0, help="largest candidate distance, µm")
    p.add_argument("--step", type=float, default=10.0, help="candidate spacing, µm")
    p.add_argument("--no-refine", action="store_true", help="skip the parabolic peak refinement")


def build_parser():
    parser = _Parser(prog="tiltlens", description="Lens-free tilted-sensor holographic reconstruction.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="synthesize a dataset from a test object")
    p.add_argument("--object", choices=("bars", "phase_steps", "smear", "uniform"), default="smear")
    p.add_argument("--object-seed", type=int, default=0)
    p.add_argument("--density", type=float, default=0.35, help="smear: covered area fraction")
    p.add_argument("--absorption", type=float, default=0.3, help="smear: largest amplitude loss")
    p.add_argument("--phase-rad", type=float, default=1.0, help="smear: largest phase delay, rad")
    p.add_argument("--diameter-um", type=float, default=8.0, help="smear: cell diameter")
    p.add_argument("--linewidths", type=_floats, default=list(DEFAULT_LINEWIDTHS),
                   help="bar linewidths in µm, comma-separated")
    p.add_argument("--phase-step-rad", type=float, default=1.0)
    p.add_argument("--wavelength-nm", type=float, default=532.0)
    p.add_argument("--tilt-deg", type=float, default=5.0)
    p.add_argument("--pixel-um", type=float, default=1.67)
    p.add_argument("--upsample", type=int, default=3)
    p.add_argument("--distance-um", type=float, default=800.0)
    p.add_argument("--rows", type=int, default=512, help="sensor rows in raw pixels")
    p.add_argument("--cols", type=int, default=512, help="sensor columns in raw pixels")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--shifts", type=Path, help="text file with one 'dx dy' stage shift in µm per line")
    g.add_argument("--auto-shifts", type=_auto_shifts, default=(10, 40.0), metavar="N,STEP",
                   help="N frames STEP µm apart along x, centred on the origin")
    p.add_argument("--jitter-um", type=float, default=10.0, help="uniform step jitter for --auto-shifts")
    p.add_argument("--shift-seed", type=int, default=1)
    p.add_argument("--photon-scale", type=float, default=0.0, help="Poisson counts at unit intensity (0 = off)")
    p.add_argument("--read-sigma", type=float, default=0.0)
    p.add_argument("--bit-depth", type=int, default=0)
    p.add_argument("--noise-seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("register", help="estimate frame shifts and store them in the manifest")
    p.add_argument("dataset", type=Path)
    p.add_argument("--upsample", type=int, default=100)

    p = sub.add_parser("autofocus", help="estimate the specimen-to-sensor distance")
    p.add_argument("dataset", type=Path)
    p.add_argument("--frame", type=int, default=0)
    _add_search(p)

    p = sub.add_parser("estimate-tilt", help="estimate the sensor tilt from two windows")
    p.add_argument("dataset", type=Path)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--region-a", type=_region, required=True, metavar="R0,R1,C0,C1")
    p.add_argument("--region-b", type=_region, required=True, metavar="R0,R1,C0,C1")
    _add_search(p)

    p = sub.add_parser("reconstruct", help="recover the specimen wavefront")
    p.add_argument("dataset", type=Path)
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--height-mode", choices=("radial", "signed"), default="signed")
    p.add_argument("--order", type=_order, default="sequential")
    p.add_argument("--guard-px", type=int, default=32)
    p.add_argument("--init", choices=("tie", "frame0"), default="tie")
    p.add_argument("--use-nominal", action="store_true",
                   help="take shifts from the stage record instead of registration")
    p.add_argument("--truth", type=Path, help="dataset directory holding the ground truth")
    p.add_argument("--edge-px", type=int, default=None,
                   help="border left out of the --truth comparison, in high-resolution samples "
                        "(default: the band whose hologram is cut off by the sensor edge)")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("stitch", help="assemble reconstructed tiles")
    p.add_argument("--tile", action="append", required=True, metavar="PREFIX:DX,DY",
                   help="field prefix and nominal top-left offset in µm; repeat per tile")
    p.add_argument("--overlap-px", type=int, default=32)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("metrics", help="compare a reconstruction with a truth field")
    p.add_argument("--recon", type=Path, required=True, help="field prefix")
    p.add_argument("--truth", type=Path, required=True, help="field prefix on the same grid")
    p.add_argument("--fit-ramp", action="store_true")
    return parser


def _geometry(args):
    return Geometry(
        wavelength_um=args.wavelength_nm / 1000.0,
        tilt_deg=args.tilt_deg,
        axis_distance_um=args.distance_um,
        sensor_pitch_um=args.pixel_um,
        upsample_factor=args.upsample,
        sensor_rows=args.rows,
        sensor_cols=args.cols,
    )


def _read_shifts(path):
    shifts = []
    for no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        s = line.split("#", 1)[0].split()
        if not s:
            continue
        if len(s) != 2:
            raise ParseError("expected 'dx dy'", line=no)
        try:
            shifts.append(ShiftVector(float(s[0]), float(s[1])))
        except ValueError:
            raise ParseError(f"not a number in {line!r}", line=no) from None
    if not shifts:
        raise ParseError("no shifts in file", line=None)
    return shifts


def cmd_simulate(args):
    geom = _geometry(args)
    if args.shifts is not None:
        stage = _read_shifts(args.shifts)
    else:
        n, step = args.auto_shifts
        stage = linear_scan(n, step, args.jitter_um, args.shift_seed, start_um=-step * (n - 1) / 2)
    shape = simulation_shape(geom, stage)
    params = {}
    meta = {"kind": args.object}
    if args.object == "bars":
        centre = common_region_center(geom, stage)
        params = {"linewidths": args.linewidths, "center_um": (centre.dx_um, centre.dy_um)}
        meta.update(linewidths=",".join(repr(float(w)) for w in args.linewidths),
                    center_x_um=repr(centre.dx_um), center_y_um=repr(centre.dy_um))
    elif args.object == "phase_steps":
        params = {"step_rad": args.phase_step_rad}
    elif args.object == "smear":
        params = {"seed": args.object_seed, "density": args.density, "absorption": args.absorption,
                  "phase_rad": args.phase_rad, "diameter_um": args.diameter_um}
    obj = synth_object(args.object, shape, geom.hires_pitch_um, **params)
    noise = None
    if args.photon_scale or args.read_sigma or args.bit_depth:
        noise = NoiseModel(args.photon_scale, args.read_sigma, args.bit_depth, seed=args.noise_seed)
    frames = simulate_dataset(obj, geom, stage, noise)
    manifest = io.save_dataset(frames, geom, args.out)
    io.save_field(obj, args.out / TRUTH_PREFIX)
    lines = [f"{k} = {v}" for k, v in meta.items()]
    io.atomic_write(args.out / TRUTH_META, ("\n".join(lines) + "\n").encode("utf-8"))
    print(f"wrote {len(frames)} frames to {manifest.parent}")
    return EXIT_OK


def cmd_register(args):
    frames, geom = io.load_dataset(args.dataset)
    registered = register_dataset(frames, args.upsample, geom)
    io.update_refined_shifts(args.dataset, registered)
    for f in registered:
        print(f"frame {f.index}: dx={f.refined_shift.dx_um:.4f} µm dy={f.refined_shift.dy_um:.4f} µm")
    return EXIT_OK


def _search(args):
    return FocusSearch(args.dmin, args.dmax, args.step, not args.no_refine)


def _frame(frames, index):
    for f in frames:
        if f.index == index:
            return f
    raise IntegrityError(f"dataset has no frame {index}")


def cmd_autofocus(args):
    frames, geom = io.load_dataset(args.dataset)
    d = autofocus_distance(_frame(frames, args.frame), geom, _search(args))
    print(f"{float(d):.3f}")
    if d.at_boundary:
        print("warning: best focus is on the edge of the search range", file=sys.stderr)
    return EXIT_OK


def cmd_estimate_tilt(args):
    frames, geom = io.load_dataset(args.dataset)
    theta = estimate_tilt_angle(_frame(frames, args.frame), geom, args.region_a, args.region_b, _search(args))
    print(f"{theta:.4f}")
    return EXIT_OK


def _read_truth_meta(directory):
    path = Path(directory) / TRUTH_META
    meta = {}
    if path.exists():
        for line in path.read_text(encoding="utf-8").splitlines():
            k, sep, v = line.partition("=")
            if sep:
                meta[k.strip()] = v.strip()
    return meta


def cmd_reconstruct(args):
    frames, geom = io.load_dataset(args.dataset)
    if args.use_nominal:
        from .forward import pattern_shift

        frames = [
            type(f)(f.intensity, f.nominal_shift, pattern_shift(f.nominal_shift - frames[0].nominal_shift, geom),
                    f.index)
            for f in frames
        ]
    elif any(f.refined_shift is None for f in frames):
        frames = register_dataset(frames, 100, geom)
    height_mode = "signed_projection" if args.height_mode == "signed" else "radial"
    cfg = ReconConfig(iterations=args.iters, guard_px=args.guard_px, height_mode=height_mode,
                      frame_order=args.order, init_mode=args.init)
    t0 = time.perf_counter()
    result = reconstruct(frames, geom, cfg)
    elapsed = time.perf_counter() - t0
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    io.save_field(result.tilted_wavefront, out / "wavefront")
    io.save_field(result.object, out / "object")
    io.atomic_write(out / "errors.txt",
                    "".join(f"{i + 1} {e!r}\n" for i, e in enumerate(result.per_iteration_error)).encode())
    summary = [f"iterations {args.iters}", f"seconds {elapsed:.2f}"]
    if args.truth is not None:
        truth = io.load_field(Path(args.truth) / TRUTH_PREFIX)
        meta = _read_truth_meta(args.truth)
        aligned, valid, origin = truth_on_recon_grid(truth, frames[0].nominal_shift, result)
        groups = ()
        if meta.get("kind") == "bars":
            widths = [float(w) for w in meta["linewidths"].split(",")]
            centre = (float(meta["center_x_um"]), float(meta["center_y_um"]))
            groups = bar_layout(widths, truth.shape, truth.pitch_x, None, centre)
        report = compute_metrics(result.object, aligned, groups, overlap_mask(result, args.edge_px) & valid, origin,
                                 per_iteration_error=result.per_iteration_error, wall_clock_s=elapsed)
        payload = {"schema": REPORT_SCHEMA, **report.as_dict()}
        assert tuple(k for k in payload if k != "schema") == REPORT_KEYS
        io.atomic_write(out / "report.json", (json.dumps(payload, indent=2) + "\n").encode())
        io.save_field(aligned, out / "truth_aligned")
        summary += [f"amplitude_correlation {report.amplitude_correlation:.4f}",
                    f"phase_rmse_rad {report.phase_rmse_rad:.4f}"]
        summary += [f"contrast_{w} {c:.3f}" for w, c in report.bar_contrast.items()]
    print("\n".join(summary))
    return EXIT_OK


def _parse_tile(text):
    prefix, sep, off = text.rpartition(":")
    if not sep:
        raise UsageError(f"tile must look like PREFIX:DX,DY, got {text!r}")
    try:
        dx, dy = (float(v) for v in off.split(","))
    except ValueError:
        raise UsageError(f"bad tile offset in {text!r}") from None
    return prefix, ShiftVector(dx, dy)


def cmd_stitch(args):
    tiles = []
    for spec in args.tile:
        prefix, offset = _parse_tile(spec)
        tiles.append((io.load_field(prefix), offset))
    mosaic = stitch_grid(tiles, args.overlap_px)
    from .field import ComplexField

    io.save_field(ComplexField(mosaic.astype(np.complex128), tiles[0][0].pitch_x, tiles[0][0].pitch_y), args.out)
    print(f"mosaic {mosaic.shape[0]}x{mosaic.shape[1]} written to {args.out}")
    return EXIT_OK


def cmd_metrics(args):
    recon = io.load_field(args.recon)
    truth = io.load_field(args.truth)
    report = compute_metrics(recon, truth, fit_ramp=args.fit_ramp)
    print(json.dumps({"schema": REPORT_SCHEMA, **report.as_dict()}, indent=2))
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "register": cmd_register,
    "autofocus": cmd_autofocus,
    "estimate-tilt": cmd_estimate_tilt,
    "reconstruct": cmd_reconstruct,
    "stitch": cmd_stitch,
    "metrics": cmd_metrics,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (NoFocusSignal, PeakAmbiguity, DegenerateGeometry, BandEdgeError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (IntegrityError, ParseError, DomainError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
