"""Chain TL over successive drifted sessions (M_1 -> M_2 -> M_3 -> M_4) for several seeds.

    python3 scripts/chain_tl.py --seeds 0 1 2 3 4 --sessions 3
"""
import argparse
from pathlib import Path

from bmitl.config import dump_config
from bmitl.experiments import MetricsSink, acceptance_config, median, run_chain


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=list(range(5)))
    ap.add_argument("--sessions", type=int, default=3, help="new sessions after the pretraining one")
    ap.add_argument("--drift", default="strong", choices=["none", "mild", "strong"])
    ap.add_argument("--out", default="runs/chain")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = []
    for seed in args.seeds:
        cfg = acceptance_config(seed, n_sessions=args.sessions + 1, synth={"drift": args.drift})
        (out / f"config_seed{seed}.json").write_text(dump_config(cfg))
        r = run_chain(cfg, MetricsSink(out / f"metrics_seed{seed}.jsonl"))
        results.append(r)
        steps = "  ".join(f"{s['tag']} {s['no_tl']:5.1f}->{s['tl']:5.1f}" for s in r["steps"])
        print(f"seed {seed}: within {r['within']:.1f}  {steps}", flush=True)
    for i, tag in enumerate(s["tag"] for s in results[0]["steps"]):
        gain = median([r["steps"][i]["tl"] - r["steps"][i]["no_tl"] for r in results])
        print(f"{tag}: median TL gain {gain:+.1f} points")


if __name__ == "__main__":
    main()
