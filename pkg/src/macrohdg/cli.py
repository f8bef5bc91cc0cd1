"""Command line front end.

Verbs: run a configured case, study convergence along one axis, report
unknown counts, and verify the interface flux properties on a random
ensemble.  A run that ends in a blow-up exits nonzero after writing its
diagnostic summary; for some configurations that is the expected result.
"""

from __future__ import annotations

import argparse
import math
import sys

from .driver import (
    convergence_study,
    dof_report,
    load_config,
    run_simulation,
)
from .errors import InvalidConfig
from .fluxes import run_flux_checks

# Thresholds on the normalized worst-case values reported by
# run_flux_checks; inequalities report signed violations, so only
# positive excess fails them.
FLUX_THRESHOLDS = {
    "ec_identity": 1e-12,
    "es_violation": 1e-12,
    "kepes_violation": 1e-12,
    "quadratic_form": 1e-11,
    "kep_structure": 1e-12,
    "barth_scaling": 1e-10,
    "barth_jacobian": 1e-10,
    "consistency": 1e-12,
}


def _cmd_run(args):
    cfg = load_config(args.config)
    result = run_simulation(cfg, out_dir=args.out)
    for key, value in result.summary.items():
        print(f"{key} = {value}")
    if not result.completed:
        t = result.failure_time
        print(f"blow-up at t = {t:.6g}", file=sys.stderr)
        return 2
    return 0


def _cmd_converge(args):
    cfg = load_config(args.config)
    report = convergence_study(cfg, args.axis, args.levels)
    label = "h" if args.axis == "space" else "dt"
    print(f"{'level':>5} {label:>12} {'L2 error':>14} {'rate':>8}")
    for row in report.rows:
        rate = "" if row.rate is None else f"{row.rate:8.3f}"
        print(f"{row.level:>5} {row.resolution:>12.6g} "
              f"{row.error:>14.6e} {rate:>8}")
    return 0


def _cmd_dofs(args):
    cfg = load_config(args.config)
    report = dof_report(cfg)
    width = max(len(k) for k in report)
    for key, value in report.items():
        print(f"{key:<{width}} = {value}")
    return 0


def _cmd_fluxcheck(args):
    report = run_flux_checks(samples=args.samples, seed=args.seed)
    failures = 0
    for d, checks in sorted(report.items()):
        samples = checks["samples"]
        print(f"dimension {d} ({samples} random state pairs):")
        for name, threshold in FLUX_THRESHOLDS.items():
            value = checks[name]
            ok = value <= threshold and math.isfinite(value)
            failures += not ok
            tag = "PASS" if ok else "FAIL"
            print(f"  {tag} {name:<16} {value:11.3e} <= {threshold:g}")
    return 1 if failures else 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="macrohdg",
        description="Macro-element hybridized DG compressible flow solver",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one configured case")
    p_run.add_argument("config", help="path to a key = value config file")
    p_run.add_argument("--out", default=None,
                       help="output directory (overrides output.dir)")
    p_run.set_defaults(func=_cmd_run)

    p_conv = sub.add_parser("converge", help="refinement study")
    p_conv.add_argument("config")
    p_conv.add_argument("--axis", choices=("space", "time"), required=True)
    p_conv.add_argument("--levels", type=int, default=3)
    p_conv.set_defaults(func=_cmd_converge)

    p_dofs = sub.add_parser("dofs", help="report unknown counts")
    p_dofs.add_argument("config")
    p_dofs.set_defaults(func=_cmd_dofs)

    p_flux = sub.add_parser("fluxcheck",
                            help="verify interface flux properties")
    p_flux.add_argument("--samples", type=int, default=10000)
    p_flux.add_argument("--seed", type=int, default=20260816)
    p_flux.set_defaults(func=_cmd_fluxcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InvalidConfig as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
