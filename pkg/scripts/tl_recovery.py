"""Strong-drift TL recovery over several seeds: within-session CV, no-TL and TL accuracy.

    python3 scripts/tl_recovery.py --seeds 0 1 2 3 4 --out runs/tl_recovery
"""
import argparse
import time
from pathlib import Path

from bmitl.config import dump_config
from bmitl.experiments import MetricsSink, acceptance_config, median, run_tl


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=list(range(5)))
    ap.add_argument("--drift", default="strong", choices=["none", "mild", "strong"])
    ap.add_argument("--out", default="runs/tl_recovery")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    print(f"{'seed':>4}  {'within':>6}  {'no-TL':>6}  {'TL':>6}  {'sec':>5}")
    for seed in args.seeds:
        cfg = acceptance_config(seed, synth={"drift": args.drift})
        (out / f"config_seed{seed}.json").write_text(dump_config(cfg))
        t = time.perf_counter()
        r = run_tl(cfg, MetricsSink(out / f"metrics_seed{seed}.jsonl"))
        rows.append(r)
        print(f"{seed:>4}  {r['within']:>6.1f}  {r['no_tl']:>6.1f}  {r['tl']:>6.1f}  {time.perf_counter() - t:>5.0f}", flush=True)
    print(f"{'med':>4}  {median([r['within'] for r in rows]):>6.1f}  {median([r['no_tl'] for r in rows]):>6.1f}"
          f"  {median([r['tl'] for r in rows]):>6.1f}")


if __name__ == "__main__":
    main()
