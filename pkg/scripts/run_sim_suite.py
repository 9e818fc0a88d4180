#!/usr/bin/env python3
"""Run every scenario under scenarios/ and write one report per scenario.

Usage: python scripts/run_sim_suite.py [--out results/sim] [--seed N]
Exit code 0 when every predicate of every scenario passes.
"""

import argparse
import sys
from pathlib import Path

from certsso.simnet import assert_transcript, format_report, parse_scenario, run_scenario

ROOT = Path(__file__).resolve().parent.parent


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--scenarios", default=str(ROOT / "scenarios"))
    parser.add_argument("--out", default=str(ROOT / "results" / "sim"))
    parser.add_argument("--seed", type=int, default=None)
    args = parser.parse_args()

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    failures = 0
    paths = sorted(Path(args.scenarios).glob("*.scn"))
    if not paths:
        print(f"no scenarios in {args.scenarios}", file=sys.stderr)
        return 2
    for path in paths:
        scenario = parse_scenario(path.read_text())
        result = run_scenario(scenario, seed=args.seed)
        reports = assert_transcript(result, scenario)
        text = format_report(result, scenario, reports)
        report_path = out_dir / f"{path.stem}.report"
        report_path.write_text(text)
        (out_dir / f"{path.stem}.transcript").write_text(
            result.transcript.to_text()
        )
        ok = all(r.passed for r in reports)
        failures += not ok
        print(f"{path.name}: {'ok' if ok else 'FAILED'} -> {report_path}")
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
