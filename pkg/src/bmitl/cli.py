"""Command-line front door.

    bmitl synth    --config C --out DIR          generate sessions
    bmitl cv       --config C [--session DIR]    within-session rolling CV
    bmitl pretrain --config C --out CKPT         CV-selected N_ep, then pretraining
    bmitl tl       --config C [--k-train K ...]  one-to-one / multi-to-one TL
    bmitl chain    --config C                    chain TL over sessions 1..n-1
    bmitl budget   --config C                    edge latency/energy/battery report
    bmitl report   METRICS.jsonl ...             metrics -> tables
    bmitl selftest [--full]                      acceptance checks, exit 4 on failure

Exit codes: 0 success, 2 config error, 3 data error, 4 self-test failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, dump_config, parse_config
from .dataio import SessionFormatError, write_session
from .edgebudget import budget_report, count_macs
from .experiments import (
    MetricsSink,
    acceptance_config,
    pretrain_from_sessions,
    read_metrics,
    run_chain,
    run_cv,
    run_tl,
    session_loader,
    subject_profile,
    synth_one,
)
from .tinynet import CheckpointError, save_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_SELFTEST = 0, 2, 3, 4

log = logging.getLogger("bmitl")


def _outdir(cfg: ExperimentConfig, args, name: str) -> Path:
    out = Path(args.out) if getattr(args, "out", None) else cfg.resolved_output_dir() / name
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.json").write_text(dump_config(cfg))
    return out


def _load_cfg(args) -> ExperimentConfig:
    cfg = parse_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "session", None):
        cfg = replace(cfg, sessions=tuple(args.session))
    return cfg


# -- subcommands ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _load_cfg(args)
    out = _outdir(cfg, args, "synth")
    profile = subject_profile(cfg)
    for i in range(cfg.synth.n_sessions):
        session = synth_one(cfg, i, profile)
        manifest = write_session(session, out / session.session_id)
        print(f"{session.session_id}: {len(manifest['runs'])} runs -> {out / session.session_id}")
    return EXIT_OK


def cmd_cv(args) -> int:
    cfg = _load_cfg(args)
    out = _outdir(cfg, args, "cv")
    sink = MetricsSink(out / "metrics.jsonl")
    run_cv(cfg, session_loader(cfg, 0)(), sink)
    print(format_report(sink.records))
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _load_cfg(args)
    out = _outdir(cfg, args, "pretrain")
    sink = MetricsSink(out / "metrics.jsonl")
    n = cfg.tl.pretrain_sessions
    datas = [session_loader(cfg, i)() for i in range(n)]
    ckpt, _ = pretrain_from_sessions(cfg, datas, sink)
    path = out / f"{ckpt.tag}.bmck"
    save_checkpoint(ckpt, path)
    print(format_report(sink.records))
    print(f"checkpoint -> {path}")
    return EXIT_OK


def cmd_tl(args) -> int:
    cfg = _load_cfg(args)
    out = _outdir(cfg, args, "tl")
    sink = MetricsSink(out / "metrics.jsonl")
    run_tl(cfg, sink, args.k_train)
    print(format_report(sink.records))
    return EXIT_OK


def cmd_chain(args) -> int:
    cfg = _load_cfg(args)
    out = _outdir(cfg, args, "chain")
    sink = MetricsSink(out / "metrics.jsonl")
    run_chain(cfg, sink)
    print(format_report(sink.records))
    return EXIT_OK


def cmd_budget(args) -> int:
    cfg = _load_cfg(args)
    out = _outdir(cfg, args, "budget")
    report = budget_report(cfg.net, cfg.cost)
    report["macs_per_layer"] = {k: v for k, v in count_macs(cfg.net).items() if k != "total"}
    (out / "budget.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    for key in ("macs", "latency_ms", "energy_uj", "avg_power_mw", "battery_h"):
        val = report[key]
        print(f"{key:>13}: {val:.3f}" if isinstance(val, float) else f"{key:>13}: {val}")
    return EXIT_OK


def cmd_report(args) -> int:
    records = []
    for path in args.metrics:
        try:
            records += read_metrics(path)
        except (OSError, json.JSONDecodeError) as exc:
            raise SessionFormatError(f"cannot read metrics {path}: {exc}") from exc
    print(format_report(records))
    return EXIT_OK


def cmd_selftest(args) -> int:
    results = selftest(full=args.full)
    for name, ok, detail in results:
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_SELFTEST


# -- reporting ------------------------------------------------------------------------------


def format_report(records: list[dict]) -> str:
    """Table-style text: CV folds, pretraining, TL rows."""
    lines = []
    folds = [r for r in records if r["kind"] == "cv_fold"]
    for s in (r for r in records if r["kind"] == "cv_summary"):
        lines.append(f"within-session CV  session {s['session_id']}  runs {s['n_runs']}  folds {s['n_folds']}")
        lines.append("  fold  train     val       acc[%]  best_ep")
        for f in (f for f in folds if f["session_id"] == s["session_id"]):
            tr, va = f["train_runs"], f["val_runs"]
            lines.append(
                f"  {f['fold']:>4}  {tr[0]:>2}-{tr[1] - 1:<5} {va[0]:>2}-{va[1] - 1:<5} {f['val_acc']:>7.2f}  {f['best_epoch']:>7}"
            )
        lines.append(f"  mean {s['mean_acc']:.2f} +- {s['std_acc']:.2f}")
    for p in (r for r in records if r["kind"] == "pretrain"):
        conv = {True: "converged", False: "no convergence", None: "fixed"}[p["converged"]]
        lines.append(f"pretrain {p['tag']} on {','.join(p['sessions'])}: N_ep={p['n_ep']} ({conv})")
    tls = [r for r in records if r["kind"] == "tl"]
    if tls:
        lines.append("  scheme        model  session  k_train  n_val  best_ep  no-TL[%]  TL[%]  acq[min]")
        for r in tls:
            lines.append(
                f"  {r['scheme']:<13} {r['tag']:<6} {r['session_id']:<8} {r['k_train']:>7}  {r['n_val']:>5}"
                f"  {r['best_epoch']:>7}  {r['baseline_test_acc']:>8.2f}  {r['test_acc']:>5.2f}"
                f"  {r['calibration_minutes']:>8.1f}"
            )
    return "\n".join(lines) if lines else "(no records)"


# -- self-test ------------------------------------------------------------------------------


def selftest(full: bool = False) -> list[tuple[str, bool, str]]:
    """Fast arithmetic and filter checks; ``full`` adds a one-seed TL experiment."""
    from .dsp import design_bandpass, design_notch, freq_response
    from .edgebudget import CostModel, battery_life
    from .harness import calibration_time, make_rolling_folds
    from .tinynet import NetConfig

    res = []
    pairs = [(16, 7), (16, 7), (12, 3), (13, 4), (16, 7), (12, 3), (20, 11)]
    got = [len(make_rolling_folds(n)) for n, _ in pairs]
    res.append(("fold arithmetic", got == [f for _, f in pairs], f"folds {got}"))
    times = [round(calibration_time(k, 2), 1) for k in range(8, 2, -1)]
    ok = all(abs(calibration_time(k, 2) - t) <= 0.05 for k, t in zip(range(8, 2, -1), (16.7, 15, 13.3, 11.7, 10, 8.3)))
    ok = ok and abs(calibration_time(3, 0) - 5.0) <= 0.05
    res.append(("calibration time", ok, f"minutes {times} / {calibration_time(3, 0):.1f}"))
    hours = battery_life(CostModel())
    res.append(("battery life", 29.5 <= hours <= 30.6, f"{hours:.2f} h"))
    b = budget_report(NetConfig(), CostModel())
    res.append(("edge anchor", 5 <= b["latency_ms"] <= 7 and b["energy_uj"] <= 30,
                f"{b['latency_ms']:.2f} ms, {b['energy_uj']:.2f} uJ"))
    notch, bp = design_notch(50.0), design_bandpass(0.5, 100.0)
    h = lambda c, f: float(np.abs(freq_response(c, f)))
    ok = (h(notch, 50) <= 0.01 and min(h(notch, 45), h(notch, 55)) >= 0.7
          and abs(h(bp, 0.5) - 0.7071) <= 0.02 and abs(h(bp, 100) - 0.7071) <= 0.02
          and h(bp, 10) >= 0.99 and h(bp, 0) <= 1e-3 and notch.is_stable() and bp.is_stable())
    res.append(("filters", ok, f"|H_notch(50)|={h(notch, 50):.1e}, |H_bp(0.5)|={h(bp, 0.5):.4f}"))
    if full:
        out = run_tl(acceptance_config(0), MetricsSink())
        ok = out["tl"] >= out["no_tl"] + 15
        res.append(("TL recovery (seed 0)", ok, f"within {out['within']:.1f}, no-TL {out['no_tl']:.1f}, TL {out['tl']:.1f}"))
    return res


# -- entry point ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bmitl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="JSON experiment config (defaults when omitted)")
        sp.add_argument("--seed", type=int, help="override the experiment seed")
        sp.add_argument("--session", nargs="+", help="session directories (default: synthesise)")
        if out:
            sp.add_argument("--out", help="output directory (default: $BMITL_OUTPUT_ROOT/<cmd>)")
        return sp

    common(sub.add_parser("synth", help="generate synthetic sessions")).set_defaults(fn=cmd_synth)
    common(sub.add_parser("cv", help="within-session rolling CV")).set_defaults(fn=cmd_cv)
    common(sub.add_parser("pretrain", help="train M_pre")).set_defaults(fn=cmd_pretrain)
    sp = common(sub.add_parser("tl", help="one-to-one / multi-to-one transfer learning"))
    sp.add_argument("--k-train", type=int, nargs="+", help="TL training runs, one row each (e.g. 8 7 6 5 4 3)")
    sp.set_defaults(fn=cmd_tl)
    common(sub.add_parser("chain", help="chain transfer learning")).set_defaults(fn=cmd_chain)
    common(sub.add_parser("budget", help="edge budget report")).set_defaults(fn=cmd_budget)
    sp = sub.add_parser("report", help="render JSON-lines metrics as tables")
    sp.add_argument("metrics", nargs="+")
    sp.set_defaults(fn=cmd_report)
    sp = sub.add_parser("selftest", help="acceptance self-test")
    sp.add_argument("--full", action="store_true", help="also run a one-seed TL experiment (~2 min)")
    sp.set_defaults(fn=cmd_selftest)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    t0 = time.perf_counter()
    try:
        code = args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SessionFormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    log.info("%s finished in %.1f s", args.cmd, time.perf_counter() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
