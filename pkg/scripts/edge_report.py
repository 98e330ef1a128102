"""Edge budget of the default network plus 8-bit fidelity against the float model.

    python3 scripts/edge_report.py --epochs 30
"""
import argparse

import numpy as np

from bmitl.edgebudget import budget_report, count_macs, quantize, quantized_forward
from bmitl.experiments import acceptance_config, subject_profile, synth_one
from bmitl.harness import prepare_session
from bmitl.synthgen import DriftParams, synth_session
from bmitl.tinynet import forward, init_model, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--n-test", type=int, default=1000)
    args = ap.parse_args()
    cfg = acceptance_config(args.seed)
    for layer, macs in count_macs(cfg.net).items():
        print(f"{layer:>10}: {macs:>9,d} MACs")
    for k, v in budget_report(cfg.net, cfg.cost).items():
        print(f"{k:>12}: {v:.3f}" if isinstance(v, float) else f"{k:>12}: {v}")

    src = prepare_session(synth_one(cfg, 0))
    x, y = src.runs(range(src.n_runs))
    ck, _ = train(init_model(cfg.net), x, y, epochs=args.epochs, batch_size=16, seed=args.seed)
    q = quantize(ck.model, x)
    profile = subject_profile(cfg)
    test, i = [], 0
    while sum(len(t) for t in test) < args.n_test:
        d = prepare_session(synth_session(profile, DriftParams.preset("mild", 100 + i), 12, 900 + i))
        test.append(d.x.reshape(-1, 8, 950))
        i += 1
    test = np.concatenate(test)[: args.n_test]
    audit = {}
    q_cls, _ = quantized_forward(q, test, audit)
    agree = np.mean(q_cls == forward(ck.model, test).argmax(axis=1))
    print(f"8-bit vs float label agreement: {100 * agree:.2f}% on {len(test)} epochs")
    print("peak |accumulator| per stage: " + ", ".join(f"{k} {v:,d}" for k, v in audit.items()))


if __name__ == "__main__":
    main()
