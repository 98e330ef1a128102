"""Rolling-window CV, pretraining-epoch selection and transfer-learning schedules."""
from __future__ import annotations

import gc
from dataclasses import dataclass, field, asdict
from typing import Callable, Iterable

import numpy as np

from .dataio import Label, Session, two_class_view
from .dsp import Preprocessor, preprocess_batch
from .tinynet import Checkpoint, History, NetConfig, evaluate, init_model, train

TRIALS_PER_TWO_CLASS_RUN = 10
TRIAL_SECONDS = 10.0


@dataclass(frozen=True)
class TrainParams:
    epochs: int = 500
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0


# -- data --------------------------------------------------------------------------


@dataclass
class SessionData:
    """Preprocessed two-class epochs of one session, grouped by run."""

    session_id: str
    x: np.ndarray  # (n_runs, 10, 8, 950)
    y: np.ndarray  # (n_runs, 10) with 0 = Left, 1 = Right

    @property
    def n_runs(self) -> int:
        return self.x.shape[0]

    def runs(self, idx) -> tuple[np.ndarray, np.ndarray]:
        idx = list(idx)
        return self.x[idx].reshape(-1, *self.x.shape[2:]), self.y[idx].reshape(-1)


def prepare_session(session: Session, pre: Preprocessor | None = None) -> SessionData:
    xs, ys = [], []
    for run in session.runs:
        pairs = two_class_view([run])
        if len(pairs) != TRIALS_PER_TWO_CLASS_RUN:
            raise ValueError(f"run holds {len(pairs)} two-class trials, expected {TRIALS_PER_TWO_CLASS_RUN}")
        raw = np.stack([t.samples for t, _ in pairs])
        xs.append(preprocess_batch(raw, [t.cue_onset for t, _ in pairs], pre))
        ys.append([int(lab == Label.RIGHT) for _, lab in pairs])
    return SessionData(session.session_id, np.stack(xs), np.asarray(ys, dtype=np.int64))


def concat_runs(datas: list[SessionData]) -> SessionData:
    """Runs of several sessions back to back, ordered by session id."""
    datas = sorted(datas, key=lambda d: d.session_id)
    return SessionData(
        "+".join(d.session_id for d in datas),
        np.concatenate([d.x for d in datas]),
        np.concatenate([d.y for d in datas]),
    )


# -- folds ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Fold:
    train_runs: range
    val_runs: range


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple[Fold, ...]
    step: int

    def __len__(self) -> int:
        return len(self.folds)

    def __iter__(self):
        return iter(self.folds)


def make_rolling_folds(n_runs: int, train: int = 8, val: int = 2, step: int = 1) -> FoldPlan:
    if min(train, val, step) < 1:
        raise ValueError("train, val and step must be >= 1")
    if n_runs < train + val:
        raise ValueError(f"{n_runs} runs cannot hold a {train}+{val} fold")
    n_folds = (n_runs - train - val) // step + 1
    folds = tuple(
        Fold(range(k * step, k * step + train), range(k * step + train, k * step + train + val))
        for k in range(n_folds)
    )
    return FoldPlan(folds, step)


@dataclass
class CVResult:
    fold_accuracies: list[float]
    best_epochs: list[int]
    histories: list[History]

    @property
    def mean(self) -> float:
        return float(np.mean(self.fold_accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.fold_accuracies))


def within_session_cv(
    data: SessionData,
    cfg: NetConfig,
    params: TrainParams,
    *,
    train_runs: int = 8,
    val_runs: int = 2,
    step: int = 1,
) -> CVResult:
    """Fresh model per fold; a fold scores its best validation accuracy over epochs."""
    plan = make_rolling_folds(data.n_runs, train_runs, val_runs, step)
    accs, best_eps, hists = [], [], []
    for k, fold in enumerate(plan):
        model = init_model(cfg)
        xt, yt = data.runs(fold.train_runs)
        xv, yv = data.runs(fold.val_runs)
        _, hist = train(
            model, xt, yt, val=(xv, yv), epochs=params.epochs, batch_size=params.batch_size,
            lr=params.lr, seed=params.seed + k,
        )
        va = np.asarray(hist.val_acc)
        best = int(np.argmax(va))  # earliest maximum
        accs.append(float(va[best]))
        best_eps.append(best + 1)
        hists.append(hist)
    return CVResult(accs, best_eps, hists)


# -- pretraining epoch ---------------------------------------------------------------


@dataclass(frozen=True)
class ConvergenceRule:
    smooth: int = 10
    horizon: int = 20
    loss_rel_tol: float = 0.01
    acc_tol: float = 1.0


def _moving_average(x: np.ndarray, w: int) -> np.ndarray:
    c = np.cumsum(np.insert(x, 0, 0.0))
    return (c[w:] - c[:-w]) / w


def select_pretrain_epoch(histories: list[History], rule: ConvergenceRule = ConvergenceRule()) -> tuple[int, bool]:
    """``(N_ep, converged)``.

    Fold-averaged validation loss and accuracy are smoothed with a trailing
    moving average; N_ep is the first epoch whose smoothed loss stays within
    ``loss_rel_tol`` and smoothed accuracy within ``acc_tol`` points over the
    next ``horizon`` epochs. Falls back to the last epoch when never met.
    """
    if not histories or any(len(h.val_loss) == 0 for h in histories):
        raise ValueError("every fold needs a validation history")
    n = min(len(h.val_loss) for h in histories)
    loss = np.mean([h.val_loss[:n] for h in histories], axis=0)
    acc = np.mean([h.val_acc[:n] for h in histories], axis=0)
    w = min(rule.smooth, n)
    sl, sa = _moving_average(loss, w), _moving_average(acc, w)
    # sl[i] is the smoothed value at epoch index i + w - 1
    for i in range(len(sl) - rule.horizon):
        ahead_l = sl[i + 1 : i + 1 + rule.horizon]
        ahead_a = sa[i + 1 : i + 1 + rule.horizon]
        if np.all(np.abs(ahead_l - sl[i]) < rule.loss_rel_tol * abs(sl[i])) and np.all(
            np.abs(ahead_a - sa[i]) < rule.acc_tol
        ):
            return i + w, True
    return n, False


def pretrain_tag(n_sessions: int) -> str:
    return "M_pre" if n_sessions == 1 else f"M_pre{n_sessions}S"


def pretrain(datas: list[SessionData], n_ep: int, cfg: NetConfig, params: TrainParams) -> Checkpoint:
    """Train from scratch for ``n_ep`` epochs on every two-class epoch of ``datas``."""
    if not datas:
        raise ValueError("pretraining needs at least one session")
    joined = concat_runs(datas)
    x, y = joined.runs(range(joined.n_runs))
    tag = pretrain_tag(len(datas))
    model = init_model(cfg)
    if n_ep == 0:
        return Checkpoint(model, None, 0, tag)
    ckpt, _ = train(model, x, y, epochs=n_ep, batch_size=params.batch_size, lr=params.lr, seed=params.seed, tag=tag)
    return ckpt


# -- transfer learning ----------------------------------------------------------------


def calibration_time(k_train: int, n_val: int) -> float:
    """Minutes of new-session recording: 10 two-class trials of 10 s per run."""
    if k_train < 0 or n_val < 0:
        raise ValueError("run counts must be nonnegative")
    return (k_train + n_val) * TRIALS_PER_TWO_CLASS_RUN * TRIAL_SECONDS / 60.0


def evaluate_accuracy(model, data: SessionData, runs: Iterable[int]) -> float:
    runs = list(runs)
    if not runs:
        raise ValueError("no runs to evaluate")
    x, y = data.runs(runs)
    return evaluate(model, x, y)[1]


@dataclass(frozen=True)
class EpochRule:
    kind: str = "best_val"  # or "fixed"
    epochs: int = 250

    def __post_init__(self):
        if self.kind not in ("best_val", "fixed"):
            raise ValueError(f"unknown epoch rule {self.kind!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    @classmethod
    def best_val(cls, max_epochs: int = 250) -> "EpochRule":
        return cls("best_val", max_epochs)

    @classmethod
    def fixed(cls, n: int) -> "EpochRule":
        return cls("fixed", n)


@dataclass
class TLReport:
    scheme: str
    session_id: str
    start_tag: str
    tag: str
    k_train: int
    n_val: int
    best_epoch: int
    val_acc: float | None
    test_acc: float
    baseline_test_acc: float
    test_runs: list[int]
    calibration_minutes: float
    history: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for v in (self.val_acc, self.test_acc, self.baseline_test_acc):
            if v is not None and not 0.0 <= v <= 100.0:
                raise ValueError("accuracies must lie in [0, 100]")
        if self.calibration_minutes < 0:
            raise ValueError("calibration time must be >= 0")

    def to_record(self, with_history: bool = False) -> dict:
        rec = asdict(self)
        if not with_history:
            rec.pop("history")
        return rec


def tl_finetune(
    start: Checkpoint,
    data: SessionData,
    k_train: int = 3,
    n_val: int = 2,
    rule: EpochRule = EpochRule(),
    params: TrainParams = TrainParams(),
    *,
    tag: str = "M_TL",
    scheme: str = "one_to_one",
) -> tuple[TLReport, Checkpoint]:
    """Fine-tune every layer of ``start`` on the first ``k_train`` runs, pick the
    epoch on the next ``n_val`` runs, test on the rest."""
    if k_train < 1:
        raise ValueError("k_train must be >= 1")
    if rule.kind == "best_val" and n_val < 1:
        raise ValueError("best_val selection needs validation runs")
    if data.n_runs <= k_train + n_val:
        raise ValueError(f"session has {data.n_runs} runs; need more than {k_train + n_val}")
    train_runs = range(k_train)
    val_runs = range(k_train, k_train + n_val)
    test_runs = list(range(k_train + n_val, data.n_runs))
    baseline = evaluate_accuracy(start.model, data, test_runs)
    xt, yt = data.runs(train_runs)
    val = data.runs(val_runs) if n_val else None
    select = "best_val" if rule.kind == "best_val" else "final"
    ckpt, hist = train(
        start, xt, yt, val=val, epochs=rule.epochs, batch_size=params.batch_size,
        lr=params.lr, seed=params.seed, select=select, tag=tag,
    )
    if rule.epochs == 0:
        ckpt = start.copy()
        ckpt.tag = tag
    best_epoch = ckpt.epoch - start.epoch
    val_acc = None
    if val is not None and len(hist):
        val_acc = hist.val_acc[best_epoch - 1] if best_epoch else None
    report = TLReport(
        scheme=scheme,
        session_id=data.session_id,
        start_tag=start.tag,
        tag=tag,
        k_train=k_train,
        n_val=n_val,
        best_epoch=best_epoch,
        val_acc=val_acc,
        test_acc=evaluate_accuracy(ckpt.model, data, test_runs),
        baseline_test_acc=baseline,
        test_runs=test_runs,
        calibration_minutes=calibration_time(k_train, n_val),
        history=hist.to_dict(),
    )
    return report, ckpt


SessionLoader = Callable[[], SessionData]


def tl_chain(
    initial: Checkpoint,
    loaders: Iterable[SessionLoader],
    k_train: int = 3,
    n_val: int = 2,
    rule: EpochRule = EpochRule(),
    params: TrainParams = TrainParams(),
    on_step: Callable[[TLReport, Checkpoint], None] | None = None,
) -> list[TLReport]:
    """Sequential TL: each step sees one checkpoint and one session only.

    ``loaders`` yield zero-argument callables; a session is loaded right
    before its step and released before the next one is requested.
    """
    reports = []
    ckpt = initial
    for i, load in enumerate(loaders):
        data = load()
        report, ckpt = tl_finetune(ckpt, data, k_train, n_val, rule, params, tag=f"M_{i + 2}", scheme="chain")
        del data
        gc.collect()
        reports.append(report)
        if on_step is not None:
            on_step(report, ckpt)
    if not reports:
        raise ValueError("chain needs at least one new session")
    return reports
