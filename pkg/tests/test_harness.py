import gc
import statistics
import weakref

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from bmitl.harness import (
    ConvergenceRule,
    EpochRule,
    SessionData,
    TLReport,
    TrainParams,
    calibration_time,
    concat_runs,
    evaluate_accuracy,
    make_rolling_folds,
    prepare_session,
    pretrain,
    pretrain_tag,
    select_pretrain_epoch,
    tl_chain,
    tl_finetune,
    within_session_cv,
)
from bmitl.dsp import standardize
from bmitl.tinynet import Checkpoint, History, NetConfig, init_model

TABLE_RUNS_TO_FOLDS = [(16, 7), (16, 7), (12, 3), (13, 4), (16, 7), (12, 3), (20, 11)]
FAST = TrainParams(epochs=30, batch_size=16, seed=0)


def toy_data(n_runs=12, noise=0.3, seed=0, session_id="toy", identical=False):
    """Two-class epochs: a 10 Hz burst on channel 1 (Left) or 6 (Right)."""
    rng = np.random.default_rng(seed)
    t = np.arange(950) / 250
    y = np.stack([rng.permutation([0] * 5 + [1] * 5) for _ in range(n_runs)])
    if identical:
        y[:] = y[0]
    x = noise * rng.standard_normal((n_runs, 10, 8, 950))
    if identical:
        x[:] = x[0]
    for r in range(n_runs):
        for i in range(10):
            ch = 1 if y[r, i] == 0 else 6
            x[r, i, ch] += np.sin(2 * np.pi * 10 * t + 0.7 * i)
    x = standardize(x)
    return SessionData(session_id, x.astype(np.float32), y)


# -- folds -----------------------------------------------------------------------


@pytest.mark.parametrize("n_runs,n_folds", TABLE_RUNS_TO_FOLDS + [(10, 1)])
def test_fold_counts(n_runs, n_folds):
    assert len(make_rolling_folds(n_runs)) == n_folds


@given(st.integers(2, 40), st.integers(1, 10), st.integers(1, 4), st.integers(1, 5))
def test_fold_plan_invariants(n_runs, train, val, step):
    if n_runs < train + val:
        with pytest.raises(ValueError):
            make_rolling_folds(n_runs, train, val, step)
        return
    plan = make_rolling_folds(n_runs, train, val, step)
    assert len(plan) == (n_runs - train - val) // step + 1
    for k, fold in enumerate(plan):
        assert fold.train_runs == range(k * step, k * step + train)
        assert fold.val_runs.start == fold.train_runs.stop and len(fold.val_runs) == val
        assert fold.val_runs.stop <= n_runs


def test_calibration_time_column():
    table = {8: 16.7, 7: 15.0, 6: 13.3, 5: 11.7, 4: 10.0, 3: 8.3}
    for k, minutes in table.items():
        assert abs(calibration_time(k, 2) - minutes) <= 0.05
    assert calibration_time(3, 0) == pytest.approx(5.0)
    with pytest.raises(ValueError):
        calibration_time(-1, 2)


# -- convergence rule -------------------------------------------------------------


def _hist(loss, acc):
    h = History()
    h.val_loss, h.val_acc = list(loss), list(acc)
    h.train_loss = list(loss)
    return h


def test_convergence_flat_curves():
    n_ep, ok = select_pretrain_epoch([_hist(np.ones(100), np.full(100, 80.0))])
    rule = ConvergenceRule()
    assert ok and n_ep == rule.smooth


def test_convergence_never():
    loss = np.exp(-np.arange(100) / 10.0)  # ~10% relative drop per epoch, forever
    n_ep, ok = select_pretrain_epoch([_hist(loss, np.linspace(50, 99, 100))])
    assert not ok and n_ep == 100


def test_convergence_plateau_after_descent():
    e = np.arange(200)
    loss = np.where(e < 60, 1.0 - e / 100, 0.4)
    acc = np.where(e < 60, 50 + e * 0.5, 80.0)
    n_ep, ok = select_pretrain_epoch([_hist(loss, acc), _hist(loss, acc)])
    assert ok and 60 <= n_ep <= 80


def test_convergence_needs_history():
    with pytest.raises(ValueError):
        select_pretrain_epoch([History()])


# -- CV, pretraining -----------------------------------------------------------------


def test_cv_duplicate_runs_separable():
    data = toy_data(n_runs=10, noise=0.0, identical=True)
    cv = within_session_cv(data, NetConfig(), FAST)
    assert cv.fold_accuracies == [100.0]


def test_cv_statistics_match_reference():
    data = toy_data(n_runs=11, noise=1.0)
    cv = within_session_cv(data, NetConfig(), TrainParams(epochs=3, batch_size=16))
    assert len(cv.fold_accuracies) == 2 and len(cv.histories) == 2
    assert cv.mean == pytest.approx(statistics.fmean(cv.fold_accuracies), abs=1e-9)
    assert cv.std == pytest.approx(statistics.pstdev(cv.fold_accuracies), abs=1e-9)
    for acc, ep, h in zip(cv.fold_accuracies, cv.best_epochs, cv.histories):
        assert acc == max(h.val_acc) == h.val_acc[ep - 1]


def test_pretrain_tags_and_zero_epochs():
    assert [pretrain_tag(n) for n in (1, 2, 3)] == ["M_pre", "M_pre2S", "M_pre3S"]
    data = toy_data(n_runs=2)
    ck = pretrain([data], 0, NetConfig(seed=3), FAST)
    assert ck.tag == "M_pre" and ck.model.equals(init_model(NetConfig(seed=3)))
    with pytest.raises(ValueError):
        pretrain([], 5, NetConfig(), FAST)


def test_pretrain_order_independent():
    a, b = toy_data(2, seed=1, session_id="a"), toy_data(2, seed=2, session_id="b")
    p = TrainParams(epochs=1, batch_size=16)
    ck1 = pretrain([a, b], 1, NetConfig(), p)
    ck2 = pretrain([b, a], 1, NetConfig(), p)
    assert ck1.tag == "M_pre2S" and ck1.model.equals(ck2.model)
    assert concat_runs([b, a]).session_id == "a+b"


def test_prepare_session(session12):
    data = prepare_session(session12)
    assert data.x.shape == (12, 10, 8, 950) and data.y.shape == (12, 10)
    assert np.all(data.y.sum(axis=1) == 5)
    x, y = data.runs([3, 4])
    assert x.shape == (20, 8, 950) and y.shape == (20,)


# -- evaluation -----------------------------------------------------------------------




def test_evaluate_accuracy_denominator():
    data = toy_data(n_runs=12)
    m = init_model(NetConfig())
    m.params["dense.w"][:] = 0
    m.params["dense.b"][:] = [0.0, 1.0]  # always Right
    acc = evaluate_accuracy(m, data, range(6, 12))
    assert acc == pytest.approx(100 * data.y[6:].sum() / 60)
    data.y[6:] = 1
    assert evaluate_accuracy(m, data, range(6, 12)) == 100.0
    with pytest.raises(ValueError):
        evaluate_accuracy(m, data, [])


def test_random_labels_near_chance():
    # fixed-class predictor against balanced random labels: binomial(600, 0.5)
    rng = np.random.default_rng(0)
    data = toy_data(n_runs=60, noise=1.0)
    data.y[:] = np.stack([rng.permutation([0] * 5 + [1] * 5) for _ in range(60)])
    m = init_model(NetConfig(seed=1))
    acc = evaluate_accuracy(m, data, range(60))
    assert stats.binomtest(int(round(acc * 6)), 600, 0.5).pvalue > 1e-3


# -- transfer learning -----------------------------------------------------------------


def test_tl_zero_epochs_is_baseline():
    data = toy_data(n_runs=12)
    start = Checkpoint(init_model(NetConfig()), None, 0, "M_pre")
    rep, ck = tl_finetune(start, data, 3, 0, EpochRule.fixed(0), FAST)
    assert ck.model.equals(start.model)
    assert rep.test_acc == rep.baseline_test_acc == evaluate_accuracy(start.model, data, range(3, 12))
    assert rep.calibration_minutes == pytest.approx(5.0)


def test_tl_split_and_report():
    data = toy_data(n_runs=12)
    start = Checkpoint(init_model(NetConfig()), None, 0, "M_pre")
    rep, ck = tl_finetune(start, data, 3, 2, EpochRule.best_val(4), FAST)
    assert rep.test_runs == list(range(5, 12))
    assert not set(rep.test_runs) & set(range(5))
    assert 1 <= rep.best_epoch <= 4 and ck.epoch == rep.best_epoch
    assert rep.val_acc == max(rep.history["val_acc"])
    assert rep.calibration_minutes == pytest.approx(calibration_time(3, 2))
    assert "history" not in rep.to_record()


def test_tl_preconditions():
    data = toy_data(n_runs=5)
    start = Checkpoint(init_model(NetConfig()), None, 0, "M_pre")
    with pytest.raises(ValueError, match="need more than"):
        tl_finetune(start, data, 3, 2, EpochRule.best_val(2), FAST)
    with pytest.raises(ValueError, match="validation"):
        tl_finetune(start, toy_data(12), 3, 0, EpochRule.best_val(2), FAST)
    with pytest.raises(ValueError):
        tl_finetune(start, toy_data(12), 0, 2, EpochRule.best_val(2), FAST)


def test_tl_report_invariants():
    with pytest.raises(ValueError):
        TLReport("chain", "s", "a", "b", 3, 2, 1, 101.0, 50.0, 50.0, [5], 8.3)
    with pytest.raises(ValueError):
        TLReport("chain", "s", "a", "b", 3, 2, 1, 50.0, 50.0, 50.0, [5], -1.0)


def test_chain_tags_and_one_session_residency():
    alive = []

    def loader(i):
        def load():
            # the previous step's session must be gone before the next is built
            assert all(ref() is None for ref in alive), "more than one session resident"
            data = toy_data(n_runs=6, seed=i, session_id=f"s{i}")
            alive.append(weakref.ref(data))
            return data

        return load

    start = Checkpoint(init_model(NetConfig()), None, 0, "M_1")
    seen = []
    reports = tl_chain(start, [loader(i) for i in range(3)], 3, 2, EpochRule.best_val(1), FAST,
                       on_step=lambda rep, ck: seen.append(ck.tag))
    gc.collect()
    assert [r.tag for r in reports] == ["M_2", "M_3", "M_4"] == seen
    assert [r.start_tag for r in reports] == ["M_1", "M_2", "M_3"]
    assert all(ref() is None for ref in alive)


def test_chain_needs_sessions():
    with pytest.raises(ValueError):
        tl_chain(Checkpoint(init_model(NetConfig()), None, 0, "M_1"), [], 3, 2)
