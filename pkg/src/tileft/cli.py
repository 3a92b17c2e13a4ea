"""Command-line entry point: simulate, inject, bench and report."""
from __future__ import annotations

import argparse
import json
import sys

from .bench import (
    PUBLISHED_MEAN_RELATIVE_PERFORMANCE,
    PUBLISHED_MEDIAN_DEGRADATION,
    SCALES,
    degradation_trend,
    format_report,
    read_csv,
    run_experiment,
    summarize,
    write_csv,
)
from .errors import ConfigError, InvariantViolation, TileFTError
from .faults import detection_report, summarize_outcomes
from .runtime import CONCURRENT, DETERMINISTIC
from .scenario import build_simulator, load_scenario
from .workload import WORKLOAD_MODES, mode_by_name

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; we reserve 2 for invariant violations."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tileft", description="Replicated tile runtime with checkpoint voting.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="run a scenario and print its checkpoint log")
    p.add_argument("scenario")
    p.add_argument("--out", help="write the log here instead of stdout")

    p = sub.add_parser("inject", help="run a scenario with a fault schedule and report detection")
    p.add_argument("scenario")
    p.add_argument("faults", help="fault schedule CSV, or 'random' to use the scenario's settings")
    p.add_argument("--log", help="also write the checkpoint log to this file")

    p = sub.add_parser("bench", help="time protected against reference runs")
    p.add_argument("--modes", default="all",
                   help="comma-separated mode names (default: all six)")
    p.add_argument("--periods", type=_ints, default=[10], help="checking periods in frames, e.g. 5,10,20")
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--scale", choices=sorted(SCALES), default="desk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--runtime-mode", choices=(DETERMINISTIC, CONCURRENT), default=CONCURRENT)
    p.add_argument("--out", default="results.csv")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("report", help="summarize a benchmark CSV")
    p.add_argument("csv")
    return parser


def _simulate(args) -> int:
    scenario = load_scenario(args.scenario)
    with build_simulator(scenario) as sim:
        log = sim.run(scenario.ticks).dumps()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(log)
    else:
        sys.stdout.write(log)
    return EXIT_OK


def _inject(args) -> int:
    scenario = load_scenario(args.scenario, faults_path=args.faults)
    with build_simulator(scenario) as sim:
        sim.run(scenario.ticks)
    if args.log:
        with open(args.log, "w", encoding="utf-8") as fh:
            fh.write(sim.log.dumps())
    outcomes = detection_report(sim)
    for o in outcomes:
        print(f"tick {o.spec.trigger_tick:>5} {o.spec.kind.value:<17} tile {o.spec.target_tile} "
              f"group {o.group}: expected {o.expected_tick}, detected {o.detected_tick}, "
              f"identified {'yes' if o.identified else 'no'}, recovered {o.recovered_tick}")
    skipped = sum(r.event == "injection_skipped" for r in sim.log)
    summary = {**summarize_outcomes(outcomes), "skipped": skipped,
               "failed_groups": sorted(sim.failed_groups)}
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _bench(args) -> int:
    try:
        modes = WORKLOAD_MODES if args.modes == "all" else [mode_by_name(m.strip())
                                                             for m in args.modes.split(",")]
    except KeyError as exc:
        raise ConfigError(exc.args[0]) from None

    def progress(rec):
        arm = f"period {rec.check_period}" if rec.protected else "reference"
        print(f"rep {rec.run_idx} {rec.mode} {arm}: {rec.wall_ns / 1e6:.1f} ms", file=sys.stderr)

    records = run_experiment(modes, args.periods, args.reps, args.scale, args.seed,
                             args.runtime_mode, progress=None if args.quiet else progress)
    write_csv(records, args.out)
    print(_report_text(records))
    return EXIT_OK


def _report_text(records) -> str:
    lines = [format_report(summarize(records))]
    modes = {r.mode for r in records}
    for period in sorted({r.check_period for r in records if r.protected}):
        if len(modes) > 1:
            tau, p = degradation_trend(records, period)
            lines.append(f"period {period}: degradation trend tau {tau:+.3f}, one-sided p {p:.2g}")
    lo, hi = PUBLISHED_MEDIAN_DEGRADATION
    lines.append(f"published reference (different hardware): median degradation {lo:.0%} to {hi:.0%}, "
                 f"mean relative performance {PUBLISHED_MEAN_RELATIVE_PERFORMANCE[0]:.0%} to "
                 f"{PUBLISHED_MEAN_RELATIVE_PERFORMANCE[1]:.0%}")
    return "\n".join(lines)


def _report(args) -> int:
    print(_report_text(read_csv(args.csv)))
    return EXIT_OK


COMMANDS = {"simulate": _simulate, "inject": _inject, "bench": _bench, "report": _report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except InvariantViolation as exc:
        print(f"tileft: internal invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (TileFTError, OSError) as exc:
        print(f"tileft: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
