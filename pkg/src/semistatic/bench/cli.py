"""bench: run the branch-patching benchmark scenarios.

    bench run --scenario s6 --iterations 10000000 --seed 42 --out results.csv
    bench capabilities
    bench calibrate
"""

from __future__ import annotations

import argparse
import sys

from .. import measure
from ..branch import Runtime
from ..errors import BranchError
from .scenarios import SCENARIOS, ScenarioConfig, capability_report, run_scenario


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bench", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario")
    run.add_argument("--scenario", required=True, choices=sorted(SCENARIOS),
                     help="which experiment to run")
    run.add_argument("--iterations", type=int, default=None,
                     help="samples per variant (default 1e7 cycle-level, 1e6 counter-level)")
    run.add_argument("--seed", type=int, default=42, help="condition-sequence seed")
    run.add_argument("--warming", action="store_true",
                     help="restrict to warmed arms where the scenario has them")
    run.add_argument("--buffer", action="store_true",
                     help="restrict to buffered arms where the scenario has them")
    run.add_argument("--safe-mode", action="store_true",
                     help="page permissions toggled around every direction store")
    run.add_argument("--pin-core", type=int, default=None, metavar="N",
                     help="pin the measurement thread to core N")
    run.add_argument("--change-interval", type=int, default=None, metavar="K",
                     help="s8: iterations per condition flip; s9: worker spin count")
    run.add_argument("--fanout", type=int, default=5,
                     help="s7: number of branch targets")
    run.add_argument("--filler-macs", type=int, default=None,
                     help="hot-path filler size (multiply-accumulate count)")
    run.add_argument("--events-file", default=None,
                     help="override the raw PMU event table")
    run.add_argument("--strict-counters", action="store_true",
                     help="fail instead of degrading when events are unavailable")
    run.add_argument("--out", default=None, help="write CSV rows here")

    sub.add_parser("capabilities", help="report what this host can run")

    cal = sub.add_parser("calibrate", help="measure the fenced-read overhead")
    cal.add_argument("--iterations", type=int, default=measure.CALIBRATION_ITERATIONS)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "capabilities":
        print(capability_report())
        return 0
    if args.command == "calibrate":
        rt = Runtime()
        try:
            s = measure.calibrate_overhead(args.iterations, runtime=rt)
            print(f"overhead mean: {s.overhead_mean:.3f} cycles over {s.n} samples")
            print(f"corrected distribution: {measure.summarize(s)}")
        finally:
            rt.close()
        return 0
    cfg = ScenarioConfig(
        scenario=args.scenario,
        iterations=args.iterations,
        seed=args.seed,
        warming=args.warming,
        buffer=args.buffer,
        safe_mode=args.safe_mode,
        switch_fanout=args.fanout,
        change_interval=args.change_interval,
        pin_core=args.pin_core,
        filler_macs=args.filler_macs,
        events_file=args.events_file,
        out=args.out,
        strict_counters=args.strict_counters,
    )
    try:
        result = run_scenario(cfg)
    except BranchError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(result.describe())
    if args.out:
        print(f"csv written to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
