"""Run every experiment config in scripts/configs and write JSON/CSV reports.

    python3 scripts/run_all.py [--out reports] [--only qv_brownian duality_gap]

Prints one line per run and exits 1 if any invariant failed.
"""
import argparse
import json
import sys
from pathlib import Path

from pathhedge.experiments import ExperimentConfig, run_experiment, write_report

CONFIG_DIR = Path(__file__).resolve().parent / "configs"


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="reports")
    ap.add_argument("--only", nargs="*", help="config stems to run (default: all experiment configs)")
    args = ap.parse_args(argv)

    failed = 0
    for file in sorted(CONFIG_DIR.glob("*.json")):
        d = json.loads(file.read_text())
        if "experiment" not in d or (args.only and file.stem not in args.only):
            continue
        report, timings = run_experiment(ExperimentConfig.from_dict(d))
        write_report(report, timings, args.out, file.stem)
        bad = [k for k, v in report["invariants"].items() if not v]
        failed += bool(bad)
        status = "ok" if not bad else "FAILED " + ", ".join(bad)
        print(f"{file.stem:24s} {timings['total_s']:7.2f}s  {status}")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
