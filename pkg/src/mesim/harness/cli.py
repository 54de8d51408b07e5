"""Command line: ``mesim run | sweep | goldens | derive-cstore``.

Exit status is 0 only when every checked invariant (or golden) holds.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..channel import Scene
from ..linkbudget import make_grid, operating_region, write_region_csv
from .cstore import derive_cstore, report
from .goldens import GOLDENS, format_table, run_goldens
from .kernel import InvariantViolation, run
from .scenario import ScenarioError, load_scenario

EXIT_OK, EXIT_INVARIANT, EXIT_INPUT = 0, 1, 2


def _floats(text):
    """``a,b,c`` or ``start:stop:step`` (stop inclusive)."""
    if ":" in text:
        a, b, s = (float(x) for x in text.split(":"))
        n = int(round((b - a) / s))
        return [round(a + k * s, 12) for k in range(n + 1)]
    return [float(x) for x in text.split(",")]


def cmd_run(args) -> int:
    sc = load_scenario(args.scenario)
    try:
        bundle = run(sc, seed=args.seed, trace_decimation=args.trace_decimation)
    except InvariantViolation as exc:
        print(f"ABORT: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    out = Path(args.out or f"out_{sc.name}")
    bundle.save(out, args.trace_decimation)
    scene = bundle.metrics["scene"]
    for name, m in bundle.metrics["implants"].items():
        print(f"{name}: id={m['id']} stimuli={m['stimuli']} packet_errors={m['packet_errors']} "
              f"ledger_rel={m['ledger_residual_rel']:.2e}")
    print(f"phase spread {scene['phase_spread'] * 1e6:.3f} us, "
          f"onset spread {scene['onset_spread'] * 1e6:.3f} us")
    for k, v in scene["invariants"].items():
        print(f"invariant {k}: {'ok' if v else 'VIOLATED'}")
    print(f"wrote {out}")
    return EXIT_OK if scene["all_invariants_hold"] else EXIT_INVARIANT


def cmd_sweep(args) -> int:
    sc = load_scenario(args.scenario)
    scene = Scene(sc.coil, sc.film, sc.poses[:1], sc.tables, sc.tissue_attenuation)
    grid = make_grid(_floats(args.axial), _floats(args.lateral), _floats(args.theta_xz),
                     _floats(args.theta_yz))
    rows = operating_region(scene, grid, args.threshold)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_region_csv(rows, out)
    n = sum(r["pass"] for r in rows)
    print(f"{n}/{len(rows)} grid points pass at {args.threshold} V; wrote {out}")
    return EXIT_OK


def cmd_goldens(args) -> int:
    unknown = set(args.names) - set(GOLDENS)
    if unknown:
        print(f"unknown golden(s): {', '.join(sorted(unknown))}", file=sys.stderr)
        return EXIT_INPUT
    results = run_goldens(args.names or GOLDENS)
    print(format_table(results))
    return EXIT_OK if all(r.ok for r in results) else EXIT_INVARIANT


def cmd_derive_cstore(args) -> int:
    d = derive_cstore(args.v_start, args.v_end, args.amplitude, args.pulse_width, args.load,
                      pulse_width_total=args.pulse_width_total)
    print(json.dumps(d, indent=1) if args.json else report(d))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mesim", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="simulate a scenario and write its trace bundle")
    r.add_argument("scenario")
    r.add_argument("--out")
    r.add_argument("--seed", type=int)
    r.add_argument("--trace-decimation", type=int)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="pass/fail grid over pose parameters (shmoo CSV)")
    s.add_argument("scenario", help="template; its first implant's film and the coil drive are used")
    s.add_argument("--axial", default="0.01:0.05:0.005", help="metres, list or start:stop:step")
    s.add_argument("--lateral", default="0")
    s.add_argument("--theta-xz", default="0")
    s.add_argument("--theta-yz", default="0")
    s.add_argument("--threshold", type=float, default=1.5)
    s.add_argument("--out", default="shmoo.csv")
    s.set_defaults(func=cmd_sweep)

    g = sub.add_parser("goldens", help="run the golden scenarios and print a pass/fail table")
    g.add_argument("names", nargs="*", metavar="NAME", help=f"subset of: {', '.join(GOLDENS)}")
    g.set_defaults(func=cmd_goldens)

    c = sub.add_parser("derive-cstore", help="storage capacitor from the regulation droop")
    c.add_argument("--v-start", type=float, default=2.75)
    c.add_argument("--v-end", type=float, default=2.15)
    c.add_argument("--amplitude", type=float, default=2.5)
    c.add_argument("--pulse-width", type=float, default=1.2e-3)
    c.add_argument("--load", type=float, default=1000.0)
    c.add_argument("--pulse-width-total", action="store_true")
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=cmd_derive_cstore)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ScenarioError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INPUT
    except FileNotFoundError as exc:
        print(f"no such file: {exc.filename}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
