"""Command-line experiment runner.

    oppmesh --scenario scenarios/home.scenario --seed 1 --out home.csv

Writes one CSV per run (columns: index,sent_ms,recv_ms,latency_ms,status)
and prints a summary with mean latency, stddev, and PDR. With --runs K
the scenario is repeated over consecutive seeds and the pooled PDR is
printed with a 95% confidence interval. Exit codes: 0 success,
1 runtime/config error, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .errors import OppMeshError
from .harness import aggregate_pdr, run_experiment, run_many
from .scenario import builtin_scenario_path, load_scenario


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="oppmesh",
        description="Run a simulated opportunistic-mesh latency/PDR experiment.",
    )
    parser.add_argument("--scenario", required=True, help="scenario file path")
    parser.add_argument("--seed", type=int, default=None, help="RNG seed")
    parser.add_argument("--packets", type=int, default=None, help="packets to send")
    parser.add_argument(
        "--interval-s", type=float, default=None, help="seconds between packets"
    )
    parser.add_argument(
        "--message-bytes",
        type=int,
        default=None,
        help="target wire message size in bytes (default 2000 unless the "
        "scenario sets message_size_bytes)",
    )
    parser.add_argument("--out", default=None, help="CSV output path")
    parser.add_argument(
        "--runs", type=int, default=1, help="repeat over consecutive seeds"
    )
    parser.add_argument(
        "--strict-floodsub",
        action="store_true",
        help="forward only to neighbors that announced the topic",
    )
    return parser


def _resolve_scenario(path_text: str):
    path = Path(path_text)
    if path.exists():
        return load_scenario(path)
    try:
        return load_scenario(builtin_scenario_path(path_text))
    except OppMeshError:
        pass
    return load_scenario(path)  # raises with the original path in the message


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _resolve_scenario(args.scenario)
        if args.seed is not None:
            config = replace(config, seed=args.seed)
        if args.packets is not None:
            config = replace(config, packet_count=args.packets)
        if args.interval_s is not None:
            config = replace(config, send_interval_s=args.interval_s)
        if args.message_bytes is not None:
            config = replace(config, message_size_bytes=args.message_bytes)
        config.validate()

        out = Path(args.out) if args.out else Path(f"{config.name}.csv")
        if args.runs <= 1:
            report = run_experiment(config)
            report.write_csv(out)
            print(report.summary_line())
            print(f"wrote {out}")
        else:
            seeds = list(range(config.seed, config.seed + args.runs))
            reports = run_many(config, seeds)
            for report in reports:
                run_out = out.with_name(f"{out.stem}_seed{report.seed}{out.suffix}")
                report.write_csv(run_out)
                print(report.summary_line())
            pdr, low, high = aggregate_pdr(reports)
            print(
                f"aggregate over {args.runs} runs: PDR {pdr:.2f}% "
                f"(95% CI {low:.2f}%..{high:.2f}%)"
            )
        return 0
    except OppMeshError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
