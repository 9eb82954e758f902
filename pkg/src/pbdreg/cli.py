"""Command-line entry point: ``run``, ``gradcheck`` and ``inspect-cloud``.

Every scenario key is also a flag, e.g. ``--trajectory.amplitude 0.03``.
Exit codes: 0 success, 1 invalid input, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .errors import PbdRegError, ValidationError
from .harness import Scenario, export_results, flat_keys, gradcheck, mean_spacing, run_scenario
from .observation import load_cloud

log = logging.getLogger("pbdreg")

GRADCHECK_TOLERANCE = 1e-3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def _value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _add_overrides(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("scenario overrides")
    for key, default in flat_keys().items():
        g.add_argument(f"--{key}", dest=f"set:{key}", type=_value, metavar="VALUE",
                       default=argparse.SUPPRESS, help=f"default: {json.dumps(default)}")


def _scenario(args) -> Scenario:
    scn = Scenario.load(args.scenario) if args.scenario else Scenario()
    ov = {k[4:]: v for k, v in vars(args).items() if k.startswith("set:")}
    if getattr(args, "seed", None) is not None:
        ov["observation.rng_seed"] = args.seed
    if getattr(args, "lambda_regi", None) is not None:
        ov["registration.lambda_regi"] = args.lambda_regi
    return scn.override(ov) if ov else scn


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pbdreg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="simulate a scenario and export metrics")
    r.add_argument("--scenario", type=Path, help="JSON scenario or run manifest")
    r.add_argument("--seed", type=int)
    r.add_argument("--lambda-regi", type=float)
    r.add_argument("--no-registration-baseline", action="store_true",
                   help="skip the paired run without registration")
    r.add_argument("--out", type=Path, default=Path("results"))
    _add_overrides(r)

    g = sub.add_parser("gradcheck", help="forward-difference gradient vs central-difference oracle")
    g.add_argument("--scenario", type=Path)
    _add_overrides(g)

    i = sub.add_parser("inspect-cloud", help="print statistics of a CSV or PLY point cloud")
    i.add_argument("file", type=Path)
    return p


def cmd_run(args) -> int:
    scn = _scenario(args)
    t0 = time.perf_counter()
    step = max(scn.frame_count // 10, 1)

    def progress(f):
        if f % step == 0:
            log.info("frame %d/%d", f, scn.frame_count)

    record = run_scenario(scn, baseline=not args.no_registration_baseline, progress=progress)
    files = export_results(record, args.out)
    summary = record.summary()
    print(f"frames: {record.frame_count}  ({time.perf_counter() - t0:.1f} s)")
    for run in record.runs:
        s = summary[run]
        print(f"{run:>8} registration: mean error {s['mean_full_error']:.6g} m "
              f"(xy {s['mean_xy_error']:.6g}, z {s['mean_z_error']:.6g}), mean J {s['mean_cost']:.6g}")
    print(f"wrote {len(files)} files to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    res = gradcheck(_scenario(args))
    dev = res["max_relative_deviation"]
    print(f"particles: {res['particles']}  probe step: {res['probe_step']:.3g} m  ({res['seconds']:.2f} s)")
    print(f"max relative deviation: {dev:.6e}  [{'PASS' if dev <= GRADCHECK_TOLERANCE else 'FAIL'} <= {GRADCHECK_TOLERANCE:g}]")
    return 0


def cmd_inspect(args) -> int:
    cloud = load_cloud(args.file)
    pts = cloud.points
    print(f"points: {len(pts)}")
    if cloud.occluded_flags is not None:
        print(f"occluded: {int(cloud.occluded_flags.sum())}")
    if len(pts):
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        fmt = lambda v: " ".join(f"{c:.6g}" for c in v)  # noqa: E731
        print(f"min: {fmt(lo)}")
        print(f"max: {fmt(hi)}")
        print(f"extent: {fmt(hi - lo)}")
        print(f"centroid: {fmt(pts.mean(axis=0))}")
    if len(pts) > 1:
        print(f"mean nearest-neighbour spacing: {mean_spacing(pts):.6g}")
    return 0


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
        return {"run": cmd_run, "gradcheck": cmd_gradcheck, "inspect-cloud": cmd_inspect}[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (PbdRegError, OSError, FloatingPointError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
