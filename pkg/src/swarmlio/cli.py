"""Command-line entry points: simulate, run, evaluate, report, export-plot.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .evaluate import ate, endpoint_error, load_tum
from .session import (
    ConfigError,
    export_plot,
    load_config,
    run_session,
    simulate_dataset,
)


def _cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        from dataclasses import replace

        cfg = replace(cfg, seed=args.seed)
    out = simulate_dataset(cfg, args.out)
    print(f"dataset written to {out} ({cfg.n_robots} robots, seed {cfg.seed})")
    return 0


def _cmd_run(args) -> int:
    report = run_session(
        args.dataset,
        args.out,
        use_ranges=args.range == "on",
        use_loops=args.loops == "on",
    )
    if args.robots is not None and args.robots != len(report.per_robot):
        print(
            f"warning: dataset holds {len(report.per_robot)} robots, "
            f"--robots {args.robots} ignored",
            file=sys.stderr,
        )
    for robot, entry in sorted(report.per_robot.items()):
        if "ate_rmse" in entry:
            print(f"robot {robot}: ATE rmse {entry['ate_rmse']:.4f} m "
                  f"({entry['keyframes']} keyframes)")
        else:
            print(f"robot {robot}: {entry.get('ate_error', 'no estimate')}")
    print(f"mean ATE: {report.mean_ate:.4f} m")
    print(f"outputs in {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    est = load_tum(args.est)
    gt = load_tum(args.gt)
    if args.endpoints_only:
        result = endpoint_error(est, gt)
        print(f"final position error: {result['final_error']:.4f} m")
    else:
        result = ate(est, gt)
        print(
            f"ATE rmse {result['rmse']:.4f} m  mean {result['mean']:.4f} m  "
            f"max {result['max']:.4f} m  ({result['matches']} matches)"
        )
    return 0


def _cmd_report(args) -> int:
    path = Path(args.session) / "report.json"
    if not path.exists():
        raise FileNotFoundError(f"no report.json under {args.session}")
    data = json.loads(path.read_text())
    print(json.dumps(data, indent=2))
    return 0


def _cmd_export_plot(args) -> int:
    out = export_plot(args.session)
    print(f"plot data written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="swarmlio", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate a synthetic multi-robot dataset")
    sim.add_argument("--config", required=True)
    sim.add_argument("--out", required=True)
    sim.add_argument("--seed", type=int, default=None)
    sim.set_defaults(func=_cmd_simulate)

    run = sub.add_parser("run", help="run a collaborative session on a dataset")
    run.add_argument("--dataset", required=True)
    run.add_argument("--robots", type=int, default=None)
    run.add_argument("--range", choices=["on", "off"], default="on")
    run.add_argument("--loops", choices=["on", "off"], default="on")
    run.add_argument("--out", required=True)
    run.set_defaults(func=_cmd_run)

    ev = sub.add_parser("evaluate", help="ATE between estimate and ground truth")
    ev.add_argument("--est", required=True)
    ev.add_argument("--gt", required=True)
    ev.add_argument("--endpoints-only", action="store_true")
    ev.set_defaults(func=_cmd_evaluate)

    rep = sub.add_parser("report", help="print a session report")
    rep.add_argument("--session", required=True)
    rep.set_defaults(func=_cmd_report)

    ex = sub.add_parser("export-plot", help="emit plot-ready CSVs for a session")
    ex.add_argument("--session", required=True)
    ex.set_defaults(func=_cmd_export_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
