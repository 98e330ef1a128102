"""Table-II-style sweep: TL accuracy and calibration time as the number of TL training runs shrinks.

    python3 scripts/calibration_sweep.py --seed 0 --k 8 7 6 5 4 3
"""
import argparse
from pathlib import Path

from bmitl.cli import format_report
from bmitl.experiments import MetricsSink, acceptance_config, run_tl


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--k", type=int, nargs="+", default=[8, 7, 6, 5, 4, 3])
    ap.add_argument("--runs", type=int, default=16, help="runs per synthetic session (k + 2 must stay below it)")
    ap.add_argument("--out", default="runs/calibration_sweep")
    args = ap.parse_args()
    cfg = acceptance_config(args.seed, synth={"n_runs": args.runs})
    sink = MetricsSink(Path(args.out) / f"metrics_seed{args.seed}.jsonl")
    run_tl(cfg, sink, args.k)
    print(format_report(sink.records))


if __name__ == "__main__":
    main()
