"""End-to-end protocols shared by the CLI, the scripts and the acceptance suite."""
from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path
from typing import Callable

import numpy as np

from .config import ExperimentConfig, with_overrides
from .dataio import Session, SessionFormatError, read_session
from .harness import (
    CVResult,
    EpochRule,
    SessionData,
    TLReport,
    concat_runs,
    make_rolling_folds,
    prepare_session,
    pretrain,
    select_pretrain_epoch,
    tl_chain,
    tl_finetune,
    within_session_cv,
)
from .synthgen import DriftParams, SubjectProfile, make_profile, synth_session
from .tinynet import Checkpoint


class MetricsSink:
    """JSON-lines writer; keys sorted so identical runs give identical bytes."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def emit(self, kind: str, **fields) -> dict:
        rec = {"kind": kind, **fields}
        self.records.append(rec)
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return rec


def read_metrics(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


# -- sessions ------------------------------------------------------------------------


def subject_profile(cfg: ExperimentConfig) -> SubjectProfile:
    s = cfg.synth
    return make_profile(
        cfg.seed,
        channels_per_class=s.channels_per_class,
        amplitude=s.signature_amplitude,
        alpha=s.alpha,
        noise_floor=s.noise_floor,
        shared_amplitude=s.shared_amplitude,
        shared_jitter=s.shared_jitter,
        n_shared=s.n_shared,
    )


# session i of experiment seed s is generated with seed 10*s + 1 + i; its drift
# (i >= 1) is drawn with seed 10*s + 6 + i, so drift and signal streams never share a seed
def session_drift(cfg: ExperimentConfig, index: int) -> DriftParams:
    if index == 0:
        return DriftParams.preset("none")
    return DriftParams.preset(cfg.synth.drift, seed=10 * cfg.seed + 6 + index)


def synth_one(cfg: ExperimentConfig, index: int, profile: SubjectProfile | None = None) -> Session:
    profile = profile or subject_profile(cfg)
    return synth_session(
        profile, session_drift(cfg, index), cfg.synth.n_runs, seed=10 * cfg.seed + 1 + index,
        session_id=f"S{index}",
    )


def session_loader(cfg: ExperimentConfig, index: int) -> Callable[[], SessionData]:
    """Zero-argument loader of session ``index``: read from disk when configured, else synthesise."""

    def load() -> SessionData:
        if cfg.sessions:
            if index >= len(cfg.sessions):
                raise SessionFormatError(f"session {index} requested but only {len(cfg.sessions)} given")
            return prepare_session(read_session(cfg.sessions[index]))
        return prepare_session(synth_one(cfg, index))

    return load


def n_available_sessions(cfg: ExperimentConfig) -> int:
    return len(cfg.sessions) if cfg.sessions else cfg.synth.n_sessions


# -- protocols -----------------------------------------------------------------------


def run_cv(cfg: ExperimentConfig, data: SessionData, sink: MetricsSink, step: int | None = None) -> CVResult:
    f = cfg.folds
    step = step or f.step
    plan = make_rolling_folds(data.n_runs, f.train, f.val, step)
    cv = within_session_cv(data, cfg.net, cfg.train, train_runs=f.train, val_runs=f.val, step=step)
    for k, (fold, acc, ep) in enumerate(zip(plan, cv.fold_accuracies, cv.best_epochs)):
        sink.emit(
            "cv_fold", session_id=data.session_id, fold=k, train_runs=[fold.train_runs.start, fold.train_runs.stop],
            val_runs=[fold.val_runs.start, fold.val_runs.stop], val_acc=acc, best_epoch=ep,
        )
    sink.emit(
        "cv_summary", session_id=data.session_id, n_runs=data.n_runs, n_folds=len(plan),
        mean_acc=cv.mean, std_acc=cv.std,
    )
    return cv


def pretrain_from_sessions(
    cfg: ExperimentConfig, datas: list[SessionData], sink: MetricsSink, cv: CVResult | None = None
) -> tuple[Checkpoint, CVResult | None]:
    """N_ep from the configured value or, failing that, from CV curves over the
    pretraining data (several sessions are concatenated and folded with a larger step)."""
    if cfg.tl.pretrain_epochs is not None:
        n_ep, converged = cfg.tl.pretrain_epochs, None
    else:
        cv = cv or _pretrain_cv(cfg, datas, sink)
        n_ep, converged = select_pretrain_epoch(cv.histories, cfg.convergence)
    ckpt = pretrain(datas, n_ep, cfg.net, cfg.train)
    sink.emit(
        "pretrain", tag=ckpt.tag, sessions=sorted(d.session_id for d in datas), n_ep=n_ep, converged=converged,
    )
    return ckpt, cv


def _pretrain_cv(cfg: ExperimentConfig, datas: list[SessionData], sink: MetricsSink) -> CVResult:
    if len(datas) == 1:
        return run_cv(cfg, datas[0], sink)
    return run_cv(cfg, concat_runs(datas), sink, step=cfg.tl.multi_session_step)


def _epoch_rule(cfg: ExperimentConfig) -> EpochRule:
    return EpochRule(cfg.tl.epoch_rule, cfg.tl.max_epochs)


def _emit_tl(sink: MetricsSink, rep: TLReport) -> None:
    sink.emit("tl", **rep.to_record())


def run_tl(cfg: ExperimentConfig, sink: MetricsSink, k_values: list[int] | None = None) -> dict:
    """One-to-one (or multi-to-one) TL: CV and pretraining on the first
    ``pretrain_sessions`` sessions, fine-tuning on the next one.

    Returns the CV accuracy on the pretraining data together with the
    no-TL and TL test accuracies of each ``k_train``.
    """
    n_pre = cfg.tl.pretrain_sessions
    if n_available_sessions(cfg) < n_pre + 1:
        raise SessionFormatError(f"TL needs {n_pre + 1} sessions, have {n_available_sessions(cfg)}")
    sources = [session_loader(cfg, i)() for i in range(n_pre)]
    cv = _pretrain_cv(cfg, sources, sink)
    start, _ = pretrain_from_sessions(cfg, sources, sink, cv)
    del sources
    target = session_loader(cfg, n_pre)()
    scheme = "one_to_one" if n_pre == 1 else "multi_to_one"
    out = {"within": cv.mean, "steps": []}
    for k in k_values or [cfg.tl.k_train]:
        rep, _ = tl_finetune(start, target, k, cfg.tl.n_val, _epoch_rule(cfg), cfg.train, scheme=scheme)
        _emit_tl(sink, rep)
        out["steps"].append({"k_train": k, "no_tl": rep.baseline_test_acc, "tl": rep.test_acc})
    out["no_tl"], out["tl"] = out["steps"][0]["no_tl"], out["steps"][0]["tl"]
    return out


def run_chain(cfg: ExperimentConfig, sink: MetricsSink) -> dict:
    """Pretrain on session 0, then chain TL through every later session."""
    source = session_loader(cfg, 0)()
    start, cv = pretrain_from_sessions(cfg, [source], sink)
    del source
    start = replace(start, tag="M_1")
    loaders = [session_loader(cfg, i) for i in range(1, n_available_sessions(cfg))]
    reports = tl_chain(
        start, loaders, cfg.tl.k_train, cfg.tl.n_val, _epoch_rule(cfg), cfg.train,
        on_step=lambda rep, ck: _emit_tl(sink, rep),
    )
    return {
        "within": cv.mean if cv else None,
        "steps": [{"tag": r.tag, "no_tl": r.baseline_test_acc, "tl": r.test_acc} for r in reports],
    }


# -- acceptance presets -------------------------------------------------------------------


def acceptance_config(seed: int, n_sessions: int = 2, **overrides) -> ExperimentConfig:
    """Budget-sized protocol used by the synthetic acceptance experiments.

    Batch 16 gives enough optimiser steps on 80-trial folds for an 80-epoch
    CV budget to reach its validation plateau; TL keeps its 250-epoch default.
    """
    base = {
        "seed": seed,
        "net": {"seed": seed},
        "train": {"epochs": 80, "batch_size": 16, "seed": seed},
        "synth": {"n_sessions": n_sessions},
    }
    cfg = with_overrides(ExperimentConfig(), base)
    return with_overrides(cfg, overrides) if overrides else cfg


def median(values) -> float:
    return float(np.median(np.asarray(values, dtype=np.float64)))
