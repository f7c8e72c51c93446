"""Command line: ``run``, ``sweep`` and ``report``.

Exit status is 0 whenever the simulation completes, whatever the attack
outcome; 2 means the config or the input files were rejected.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from .harness import (
    ConfigError,
    aggregate,
    load_scenario,
    read_csv,
    report,
    run_scenario,
    sweep,
    to_csv,
)

# Values the attack was benchmarked against in the original measurements.
REFERENCE_PHASE2_MBPS = 11.63
REFERENCE_PHASE2_S = 194.21


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = load_scenario(args.config)
    log = open(args.log, "w") if args.log else None
    try:
        rep = run_scenario(cfg, args.seed, log)
    finally:
        if log:
            log.close()
    row = rep.row()
    body = {k: row[k] for k in row}
    body["failure"] = rep.failure
    body["inferred_port"] = rep.inferred_port
    body["snd_una_est"] = rep.snd_una_est
    body["positives_used"] = rep.positives_used
    body["probes_sent"] = rep.probes_sent
    print(json.dumps(body, indent=2))
    ph2 = rep.phase("phase2")
    if ph2 is not None:
        print(f"phase2 bandwidth: published {REFERENCE_PHASE2_MBPS:.2f} Mbps, "
              f"measured {ph2.bits_per_s / 1e6:.2f} Mbps")
        print(f"phase2 time:      published {REFERENCE_PHASE2_S:.2f} s, measured {ph2.elapsed_s:.2f} s")
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    cfg = load_scenario(args.config)
    reports = sweep(cfg, args.trials, args.seed_base, workers=args.workers)
    text = to_csv(reports)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    summary = aggregate(reports)
    print(f"{len(reports)} trials, success rate {summary['success_rate']:.3f}", file=sys.stderr)
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    rows = read_csv(Path(args.csv).read_text())
    if not rows:
        raise ConfigError(f"{args.csv} has no data rows")
    try:
        _, summary = report(rows)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    text = json.dumps(summary, indent=2, sort_keys=True)
    if args.summary:
        Path(args.summary).write_text(text + "\n")
    else:
        print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pmtud-hijack", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one trial and print its report")
    run.add_argument("config", help="scenario JSON file or bundled scenario name")
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--log", help="write the per-dispatch event log here")
    run.set_defaults(func=_cmd_run)

    sw = sub.add_parser("sweep", help="run many seeds and write a CSV")
    sw.add_argument("config")
    sw.add_argument("--trials", type=int, required=True)
    sw.add_argument("--seed-base", type=int, default=0)
    sw.add_argument("--workers", type=int, default=1)
    sw.add_argument("--out", help="CSV path (stdout if omitted)")
    sw.set_defaults(func=_cmd_sweep)

    rp = sub.add_parser("report", help="summarize a sweep CSV")
    rp.add_argument("csv")
    rp.add_argument("--summary", help="JSON summary path (stdout if omitted)")
    rp.set_defaults(func=_cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
