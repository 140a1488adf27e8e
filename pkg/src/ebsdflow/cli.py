"""Command-line entry point: ``ebsdflow {synth,solve,errormap,render}``.

Exit codes: 0 success, 2 configuration error, 3 parse error, 4 numerical
failure (some level had only failed line searches).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import formats, synth
from .experiment import RENDER_RANGE, ConfigError, error_map, load_config, run_experiment
from .formats import ParseError, ensure_dir

EXIT_OK, EXIT_CONFIG, EXIT_PARSE, EXIT_NUMERICAL = 0, 2, 3, 4


def _cmd_synth(args) -> int:
    out = ensure_dir(args.out)
    angle = np.radians(args.angle)
    if args.kind == "rotated_square":
        inst = synth.make_rotated_square(args.size, angle)
    elif args.kind == "tearing_square":
        inst = synth.make_tearing_square(args.size, angle)
    else:
        I1 = synth.make_grain_image(args.size, args.grains, args.group, args.seed)
        u = synth.shear_field(args.size, args.slip)
        mode = "periodic" if args.periodic else "clamped"
        inst = synth.SyntheticInstance(I1, synth.apply_ground_truth(I1, u, mode=mode), u, "shear")
    formats.write_orientation_image(out / "I1.txt", inst.I1)
    formats.write_orientation_image(out / "I2.txt", inst.I2)
    formats.write_displacement(out / "u_true.txt", inst.u_true)
    print(f"wrote {inst.name} instance to {out}")
    return EXIT_OK


def _cmd_solve(args) -> int:
    cfg = load_config(args.config, args.set)
    if args.out is not None:
        cfg.output = args.out
    summary = run_experiment(cfg)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_NUMERICAL if summary["numerical_failure"] else EXIT_OK


def _cmd_errormap(args) -> int:
    I1 = formats.read_orientation_image(args.I1)
    I2 = formats.read_orientation_image(args.I2)
    u = formats.read_displacement(args.u)
    if I1.data.shape != I2.data.shape:
        raise ConfigError("I1 and I2 differ in size")
    emap = error_map(I1, I2, u, mode="naive" if args.naive else "rotation_aware")
    formats.write_ppm(args.out, formats.colorize_scalar(emap, *RENDER_RANGE))
    if args.txt:
        np.savetxt(args.txt, emap.T, fmt="%.10g")
    print(f"mean {emap.mean():.6g} median {np.median(emap):.6g} max {emap.max():.6g} (degrees)")
    return EXIT_OK


def _cmd_render(args) -> int:
    path = Path(args.input)
    head = path.read_text().split(None, 1)[0] if path.stat().st_size else ""
    if head == "EBSDGRID":
        rgb = formats.colorize(formats.read_orientation_image(path))
    else:
        try:
            v = np.loadtxt(path, ndmin=2).T
        except ValueError as exc:
            raise ParseError(path, 1, f"not an orientation grid or scalar table ({exc})") from None
        lo = args.vmin if args.vmin is not None else float(v.min())
        hi = args.vmax if args.vmax is not None else float(v.max())
        rgb = formats.colorize_scalar(v, lo, hi if hi > lo else lo + 1.0)
    formats.write_ppm(args.out, rgb)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ebsdflow", description="Rotation-aware registration of orientation maps.")
    p.add_argument("-v", "--verbose", action="store_true", help="log solver progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic instance")
    s.add_argument("kind", choices=["rotated_square", "tearing_square", "shear"])
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--angle", type=float, default=30.0, help="rotation angle in degrees")
    s.add_argument("--grains", type=int, default=12)
    s.add_argument("--group", default="trivial")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--slip", type=float, default=4.0)
    s.add_argument("--periodic", action="store_true")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=_cmd_synth)

    s = sub.add_parser("solve", help="run an experiment config")
    s.add_argument("config", help="JSON experiment file")
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry, e.g. solver.base_iterations=50")
    s.add_argument("--out", help="output directory (overrides the config)")
    s.set_defaults(func=_cmd_solve)

    s = sub.add_parser("errormap", help="angular error of a displacement field")
    s.add_argument("I1")
    s.add_argument("I2")
    s.add_argument("u")
    s.add_argument("--naive", action="store_true", help="do not reorient by the local rotation")
    s.add_argument("--out", required=True, help="PPM output")
    s.add_argument("--txt", help="also write the values as a text table")
    s.set_defaults(func=_cmd_errormap)

    s = sub.add_parser("render", help="render an orientation grid or scalar table as PPM")
    s.add_argument("input")
    s.add_argument("--out", required=True)
    s.add_argument("--vmin", type=float)
    s.add_argument("--vmax", type=float)
    s.set_defaults(func=_cmd_render)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
