"""Command line entry point: ``fleetslam run | sweep | plot-data``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .comms import read_log_csv, utilization, write_utilization_csv
from .sim.config import SCENARIOS, MissionConfig, NoiseConfig, apply_scenario, load_config, save_config
from .sim.mission import MetricsReport, run_mission, write_metrics_csv, write_outputs


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML config; flags below override it")
    p.add_argument("--robots", type=int, help="team size (>= 2)")
    p.add_argument("--scenario", choices=SCENARIOS)
    p.add_argument("--no-noise", action="store_true", help="zero odometry and process noise")


def _config(args: argparse.Namespace, case: Optional[int] = None, seed: Optional[int] = None) -> MissionConfig:
    cfg = load_config(args.config) if args.config else MissionConfig()
    if args.scenario is not None:
        cfg = apply_scenario(cfg, args.scenario)
    changes: dict = {}
    if case is not None:
        changes["case"] = case
    if seed is not None:
        changes["seed"] = seed
    if args.robots is not None:
        changes["robots"] = args.robots
    if args.no_noise:
        changes["noise"] = NoiseConfig((0.0, 0.0, 0.0), (0.0, 0.0, 0.0))
    return dataclasses.replace(cfg, **changes)


def _summary(r: MetricsReport) -> str:
    return (
        f"case {r.case} seed {r.seed} {r.scenario}: success={int(r.success)} ir_factors={r.ir_factors} "
        f"full MAE {r.full.mae_t:.3f} m / {r.full.mae_r:.2f} deg, "
        f"RMSE {r.full.rmse_t:.3f} m / {r.full.rmse_r:.2f} deg, "
        f"bits {r.total_bits}, avg {r.net_avg_bps:.1f} bit/s ({r.runtime_s:.1f} s)"
    )


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _config(args, args.case, args.seed)
    result = run_mission(cfg)
    paths = write_outputs(result, args.out)
    save_config(cfg, Path(args.out) / "config.yaml")
    print(_summary(result.report))
    for name, path in paths.items():
        print(f"  {name}: {path}")
    return 0


def _mean(values: Sequence[float]) -> float:
    finite = [v for v in values if math.isfinite(v)]
    return float(np.mean(finite)) if finite else float("nan")


def aggregate(reports: Sequence[MetricsReport]) -> list[dict[str, object]]:
    """One row per case: success rate, mean error blocks and network use."""
    rows = []
    for case in sorted({r.case for r in reports}):
        rs = [r for r in reports if r.case == case]
        row: dict[str, object] = {"case": case, "runs": len(rs), "success_rate": sum(r.success for r in rs) / len(rs)}
        for name in ("full", "ir_only"):
            for f in ("mae_t", "mae_r", "rmse_t", "rmse_r"):
                row[f"{name}_{f}"] = _mean([getattr(getattr(r, name), f) for r in rs])
        row["net_avg_bps"] = _mean([r.net_avg_bps for r in rs])
        row["net_min_bps"] = _mean([r.net_min_bps for r in rs])
        row["net_max_bps"] = _mean([r.net_max_bps for r in rs])
        row["total_bits"] = _mean([r.total_bits for r in rs])
        rows.append(row)
    return rows


def format_table(rows: Sequence[dict[str, object]]) -> str:
    head = (
        f"{'case':>4} {'succ':>5} | {'full MAE m/deg':>15} {'full RMSE m/deg':>16} | "
        f"{'IR MAE m/deg':>13} {'IR RMSE m/deg':>14} | {'avg':>8} {'min':>8} {'max':>9} bit/s"
    )
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(
            f"{r['case']:>4} {r['success_rate']:>5.0%} | "
            f"{r['full_mae_t']:>7.3f}/{r['full_mae_r']:<7.2f} {r['full_rmse_t']:>8.3f}/{r['full_rmse_r']:<7.2f} | "
            f"{r['ir_only_mae_t']:>6.3f}/{r['ir_only_mae_r']:<6.2f} {r['ir_only_rmse_t']:>7.3f}/{r['ir_only_rmse_r']:<6.2f} | "
            f"{r['net_avg_bps']:>8.1f} {r['net_min_bps']:>8.1f} {r['net_max_bps']:>9.1f}"
        )
    return "\n".join(lines)


def cmd_sweep(args: argparse.Namespace) -> int:
    reports = []
    for case in args.cases:
        for seed in range(args.first_seed, args.first_seed + args.seeds):
            r = run_mission(_config(args, case, seed)).report
            print(_summary(r), flush=True)
            reports.append(r)
    rows = aggregate(reports)
    print()
    print(format_table(rows))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(reports, out / "sweep_runs.csv")
        with open(out / "sweep_table.csv", "w", encoding="ascii") as fh:
            fh.write(",".join(rows[0]) + "\n")
            for r in rows:
                fh.write(",".join(f"{v:.6f}" if isinstance(v, float) else str(v) for v in r.values()) + "\n")
    return 0


def cmd_plot_data(args: argparse.Namespace) -> int:
    if args.log:
        log = read_log_csv(args.log)
        usage = utilization(log, args.window)
    else:
        res = run_mission(_config(args, args.case, args.seed))
        usage = utilization(res.channel.log, args.window, start=0.0, duration=res.usage.duration)
    write_utilization_csv(usage, args.out)
    print(f"{len(usage.series)} samples, avg {usage.average:.1f} bit/s, max {usage.maximum:.1f} bit/s -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fleetslam", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-robot warnings")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one mission and write its outputs")
    _common(run)
    run.add_argument("--case", type=int, choices=range(1, 6))
    run.add_argument("--seed", type=int)
    run.add_argument("--out", type=Path, default=Path("out"))
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep", help="repeat missions over seeds and cases and tabulate")
    _common(sweep)
    sweep.add_argument("--cases", type=int, nargs="+", default=[1, 2, 3, 4, 5], choices=range(1, 6))
    sweep.add_argument("--seeds", type=int, default=10, help="number of seeds")
    sweep.add_argument("--first-seed", type=int, default=0)
    sweep.add_argument("--out", type=Path, help="directory for sweep_runs.csv and sweep_table.csv")
    sweep.set_defaults(func=cmd_sweep)

    plot = sub.add_parser("plot-data", help="emit the channel utilization time series as CSV")
    _common(plot)
    plot.add_argument("--log", type=Path, help="existing channel_log.csv; otherwise a mission is run")
    plot.add_argument("--case", type=int, choices=range(1, 6))
    plot.add_argument("--seed", type=int)
    plot.add_argument("--window", type=int, default=100, help="events per sliding window")
    plot.add_argument("--out", type=Path, default=Path("utilization.csv"))
    plot.set_defaults(func=cmd_plot_data)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
