"""Command-line entry point: run scenarios, validate traces, build sampling plans."""
import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import SafePCError, SafeguardViolationError
from .experiments import (
    SCENARIOS,
    load_config,
    read_trace_csv,
    run_closed_loop,
    run_fl_demo,
    run_kedmd_convergence,
    validate_trace,
    write_trace_csv,
)
from .kedmd import plan_reference

CLOSED_LOOP = ("stabilization", "setpoint10", "setpoint1")
EXIT_VIOLATION = 2


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def _cmd_run(args) -> int:
    cfg = load_config(args.scenario, args.config, seed=args.seed)
    if args.scenario in CLOSED_LOOP:
        out = Path(args.out or f"{args.scenario}.csv")
        try:
            trace = run_closed_loop(cfg)
        except SafeguardViolationError as exc:
            partial = getattr(exc, "run_trace", None)
            if partial is not None:
                write_trace_csv(out, partial, _sidecar(out))
            print(f"FAIL {args.scenario}: {exc}", file=sys.stderr)
            return EXIT_VIOLATION
        write_trace_csv(out, trace, _sidecar(out))
        v = trace.metadata["validation"]
        print(f"{args.scenario}: {v['rows']} rows, {v['violations']} funnel violations, "
              f"max |y - y_ref| / radius = {v['max_error_to_radius']:.4f}, "
              f"activation episodes = {trace.metadata['activation_episodes']} -> {out}")
        return 0 if v["violations"] == 0 else EXIT_VIOLATION

    if args.scenario == "fl-demo":
        report = run_fl_demo(cfg.seed, cfg.fl_trials, cfg.fl_samples, cfg.fl_depth)
        for i, r in enumerate(report["trials"]):
            print(f"trial {i}: forward residual {r['forward_residual']:.3e}, "
                  f"backward mismatch {r['backward_mismatch']:.3e}, "
                  f"PE(order {r['pe_order']}) = {r['pe_required']}, "
                  f"PE(order {r['pe_capacity_order']}) = {r['pe_beyond_capacity']}")
    else:
        report = run_kedmd_convergence(cfg)
        for r in report["rows"]:
            print(f"grid {r['grid']}x{r['grid']}: fill distance {r['fill_distance']:.4f}, "
                  f"max one-step error {r['max_error']:.4e}, "
                  f"interpolation residual {r['interpolation_residual']:.2e}")
        print(f"fill distance strictly decreasing: {report['fill_strictly_decreasing']}; "
              f"error non-increasing: {report['error_non_increasing']}")
    report["config"] = cfg.as_dict()
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True, default=float)
            fh.write("\n")
    return 0


def _cmd_validate(args) -> int:
    report = validate_trace(read_trace_csv(args.csv))
    status = "OK" if report.ok else "FAIL"
    print(f"{status}: {report.rows} rows, {report.violations} violations, "
          f"max |y - y_ref| / radius = {report.max_ratio:.4f}")
    return 0 if report.ok else 1


def _read_points(path):
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                rows.append([float(v) for v in line.split(",")])
            except ValueError:
                if rows:
                    raise
                continue  # header line
    return np.array(rows)


def _cmd_plan(args) -> int:
    plan = plan_reference(_read_points(args.points), args.dt, args.eps_c, args.sigma_floor)
    plan.write_csv(args.out)
    print(f"{len(plan.windows)} knots over [0, {plan.t_end:g}], sigma = {plan.sigma:g}, "
          f"max |y_ref''| = {plan.second_derivative_bound():.4g} -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="safepc", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario")
    run.add_argument("--scenario", required=True, choices=SCENARIOS)
    run.add_argument("--config", help="flat key = value file")
    run.add_argument("--out", help="trace CSV (closed-loop) or JSON report path")
    run.add_argument("--seed", type=int)
    run.set_defaults(func=_cmd_run)

    val = sub.add_parser("validate-trace", help="check the funnel invariant on a trace CSV")
    val.add_argument("csv")
    val.set_defaults(func=_cmd_validate)

    plan = sub.add_parser("plan", help="build a sampling plan through virtual points")
    plan.add_argument("--points", required=True, help="CSV with one 'position,velocity' row per point")
    plan.add_argument("--dt", type=float, required=True, help="time between knots")
    plan.add_argument("--eps-c", dest="eps_c", type=float, required=True)
    plan.add_argument("--sigma-floor", dest="sigma_floor", type=float, default=0.0)
    plan.add_argument("--out", required=True)
    plan.set_defaults(func=_cmd_plan)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (SafePCError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
