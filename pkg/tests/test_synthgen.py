import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats
from scipy.signal import butter, sosfiltfilt

from bmitl.dataio import INSTRUCTION_SAMPLES, Label
from bmitl.dsp import EPOCH_SAMPLES
from bmitl.harness import prepare_session
from bmitl.synthgen import (
    DRIFT_PRESETS,
    DriftParams,
    make_profile,
    synth_session,
    synth_trial,
)

from .oracles import band_power


def test_profile_deterministic():
    assert make_profile(7) == make_profile(7)
    assert make_profile(7).to_dict() == make_profile(7).to_dict()


def test_profile_channel_collisions_are_rare():
    # with 2 channels per class there are C(8,2)*C(6,2) = 420 assignments
    base = make_profile(0)
    key = lambda p: (tuple(p.channels(Label.LEFT)), tuple(p.channels(Label.RIGHT)))
    same = sum(key(make_profile(s)) == key(base) for s in range(1, 101))
    assert same <= 3  # binomial(100, 1/420): P(>3) < 1e-4


@given(st.integers(0, 10_000))
def test_profile_invariants(seed):
    p = make_profile(seed, shared_amplitude=3.0)
    assert not set(p.channels(Label.LEFT)) & set(p.channels(Label.RIGHT))
    assert all(s.amplitude > 0 for ss in p.signatures.values() for s in ss)
    assert p.channels(Label.REST) == []


def test_trial_is_deterministic(profile):
    d = DriftParams.preset("mild", 3)
    a = synth_trial(profile, d, Label.LEFT, 99)
    b = synth_trial(profile, d, Label.LEFT, 99)
    assert a == b
    assert a.samples.shape == (8, 5000) and a.cue_onset == 0


def test_signature_confined_to_instruction_window():
    p = make_profile(5, noise_floor=0.0)
    drift = DriftParams.preset("none")
    inside, outside = [], []
    for seed in range(5):
        x = synth_trial(p, drift, Label.LEFT, seed).samples.astype(np.float64)
        inside.append(band_power(x[:, :INSTRUCTION_SAMPLES], 500))
        outside.append(band_power(x[:, INSTRUCTION_SAMPLES:], 500))
    inside, outside = np.mean(inside, axis=0), np.mean(outside, axis=0)
    for ch in p.channels(Label.LEFT):
        assert inside[ch] > outside[ch]


def test_zero_amplitude_classes_indistinguishable():
    p = make_profile(2).with_amplitude(0.0)
    drift = DriftParams.preset("none")
    bp = {lab: np.array([band_power(synth_trial(p, drift, lab, (int(lab), s)).samples[:, :2000], 500)
                         for s in range(30)]) for lab in (Label.LEFT, Label.RIGHT)}
    pvals = [stats.ttest_ind(bp[Label.LEFT][:, c], bp[Label.RIGHT][:, c]).pvalue for c in range(8)]
    # Bonferroni over channels at 1%
    assert min(pvals) > 0.01 / 8


def test_session_shape_and_balance(profile):
    s = synth_session(profile, DriftParams.preset("none"), 16, seed=1)
    s.validate()
    assert s.n_runs == 16
    for run in s.runs:
        labels = [t.label for t in run.trials]
        assert all(labels.count(lab) == 5 for lab in Label)
    assert s.meta["generator"]["n_runs"] == 16


def test_runs_are_shuffled_differently(session12):
    orders = {tuple(t.label for t in r.trials) for r in session12.runs}
    assert len(orders) > 1


@pytest.mark.parametrize("n", [11, 21])
def test_session_run_range(profile, n):
    with pytest.raises(ValueError, match="n_runs"):
        synth_session(profile, DriftParams.preset("none"), n, seed=0)


def test_drift_changes_channel_covariance(profile):
    cov = []
    for drift in (DriftParams.preset("none"), DriftParams.preset("strong", 4)):
        s = synth_session(profile, drift, 12, seed=5)
        x = np.concatenate([t.samples for t in s.runs[0].trials], axis=1).astype(np.float64)
        cov.append(np.cov(x))
    assert np.linalg.norm(cov[0] - cov[1]) > 0


@given(st.floats(0.0, 0.95), st.integers(0, 2**31 - 1))
def test_drift_sample_bound(delta, seed):
    d = DriftParams.sample(delta, (0.5, 2.0), seed=seed)
    assert np.linalg.norm(d.mixing - np.eye(8), 2) <= delta + 1e-9
    assert abs(np.linalg.det(d.mixing)) > 0
    assert np.all((d.gains >= 0.5 - 1e-12) & (d.gains <= 2.0 + 1e-12))


def test_drift_invariants_enforced():
    with pytest.raises(ValueError, match="delta"):
        DriftParams(mixing=np.eye(8) * 1.5, delta=0.1)
    with pytest.raises(ValueError, match="positive"):
        DriftParams(gains=-np.ones(8))
    with pytest.raises(ValueError, match="invertible"):
        DriftParams(mixing=np.zeros((8, 8)), delta=1.0)


def test_presets():
    assert set(DRIFT_PRESETS) == {"none", "mild", "strong"}
    assert DriftParams.preset("strong").delta == 0.3
    assert DriftParams.preset("mild").noise_scale == 1.2
    np.testing.assert_array_equal(DriftParams.preset("none").mixing, np.eye(8))
    with pytest.raises(KeyError):
        DriftParams.preset("wild")


# -- monotone difficulty --------------------------------------------------------------
# Oracle classifier: shrinkage LDA on 7-13 Hz spatial covariance features, which
# can learn the spatial cancellation of shared sources just like the network.

_SOS = butter(4, [7, 13], btype="bandpass", fs=250, output="sos")
_IU = np.triu_indices(8)


def _cov_features(x):
    z = sosfiltfilt(_SOS, x, axis=-1)
    c = np.einsum("nct,ndt->ncd", z, z) / z.shape[-1]
    return c[:, _IU[0], _IU[1]]


def _lda(X, y):
    m0, m1 = X[y == 0].mean(0), X[y == 1].mean(0)
    s = np.cov(np.vstack([X[y == 0] - m0, X[y == 1] - m1]).T) + 1e-3 * np.eye(X.shape[1])
    w = np.linalg.solve(s, m1 - m0)
    return w, -w @ (m0 + m1) / 2


@pytest.mark.slow
def test_monotone_difficulty():
    for seed in range(5):
        prof = make_profile(seed, shared_amplitude=6.0, n_shared=3)
        src = prepare_session(synth_session(prof, DriftParams.preset("none"), 12, seed * 10 + 1))
        w, b = _lda(_cov_features(src.x.reshape(-1, 8, EPOCH_SAMPLES)), src.y.ravel())
        accs = []
        for delta in (0.0, 0.15, 0.3):
            tgt = prepare_session(synth_session(prof, DriftParams.sample(delta, seed=seed * 10 + 7), 12, seed * 10 + 2))
            pred = (_cov_features(tgt.x.reshape(-1, 8, EPOCH_SAMPLES)) @ w + b) > 0
            accs.append(100 * np.mean(pred == tgt.y.ravel()))
        assert all(b_ <= a_ + 2 for a_, b_ in zip(accs, accs[1:])), (seed, accs)
