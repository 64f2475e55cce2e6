#!/usr/bin/env python3
"""Run the full attack/defense scenario matrix and save the artifacts.

Writes matrix.json (machine-readable reports) and latency.csv (per-trial
stage timings) into --out, and prints the rendered summary table.
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from faarm import harness
from faarm.mcu import LockMode


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--trials", type=int, default=50)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--firmware-size", type=int, default=4096)
    parser.add_argument(
        "--lock-mode",
        choices=[m.value for m in LockMode],
        default=LockMode.HARDWARE_WP.value,
    )
    parser.add_argument("--out", default="results/matrix")
    args = parser.parse_args()

    reports = harness.run_matrix(
        trials=args.trials,
        seed=args.seed,
        firmware_size=args.firmware_size,
        lock_mode=LockMode(args.lock_mode),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = {
        "trials": args.trials,
        "seed": args.seed,
        "firmware_size": args.firmware_size,
        "lock_mode": args.lock_mode,
    }
    (out / "matrix.json").write_text(harness.reports_to_json(reports, config=config))
    (out / "latency.csv").write_text(harness.latency_csv(reports))
    print(harness.render_matrix(reports))
    print(f"\nwrote {out / 'matrix.json'} and {out / 'latency.csv'}")

    regression = any(
        r.scenario.mode is harness.LoaderMode.FAARM
        and r.scenario.kind is not harness.ScenarioKind.SIGNED_GOOD
        and r.attack_success_count > 0
        for r in reports
    )
    return 1 if regression else 0


if __name__ == "__main__":
    sys.exit(main())
