"""Synthetic multi-session EEG with lateralised 8-12 Hz class signatures and session drift."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .dataio import (
    INSTRUCTION_SAMPLES,
    N_CHANNELS,
    SAMPLE_RATE,
    TRIAL_SAMPLES,
    TRIALS_PER_CLASS,
    Label,
    Run,
    Session,
    Trial,
)

MIN_RUNS, MAX_RUNS = 12, 20
RAMP_SAMPLES = 50


@dataclass(frozen=True)
class Signature:
    channel: int
    freq_hz: float
    amplitude: float


@dataclass(frozen=True)
class SubjectProfile:
    """Per-subject generative constants.

    ``shared_weights`` (K x 8), ``shared_freq_hz`` (K) and ``shared_amplitude``
    describe K idle alpha sources seen on every channel through fixed
    lead-field weights (volume conduction). Each source's per-trial amplitude
    varies log-normally by ``shared_jitter``. ``shared_amplitude=0`` disables them.
    """

    signatures: dict[Label, tuple[Signature, ...]]
    alpha: float = 1.0
    gains: tuple[float, ...] = (1.0,) * N_CHANNELS
    noise_floor: float = 0.5
    shared_weights: tuple[tuple[float, ...], ...] = ()
    shared_freq_hz: tuple[float, ...] = ()
    shared_amplitude: float = 0.0
    shared_jitter: float = 0.5
    seed: int | None = None

    def __post_init__(self):
        left = {s.channel for s in self.signatures.get(Label.LEFT, ())}
        right = {s.channel for s in self.signatures.get(Label.RIGHT, ())}
        if left & right:
            raise ValueError("Left and Right signatures must use disjoint channels")
        if any(s.amplitude < 0 for sigs in self.signatures.values() for s in sigs):
            raise ValueError("signature amplitudes must be non-negative")
        if len(self.gains) != N_CHANNELS or any(len(w) != N_CHANNELS for w in self.shared_weights):
            raise ValueError(f"need {N_CHANNELS} baseline gains and shared-source weights")
        if len(self.shared_weights) != len(self.shared_freq_hz):
            raise ValueError("one frequency per shared source")

    def channels(self, label: Label) -> list[int]:
        return [s.channel for s in self.signatures.get(label, ())]

    def with_amplitude(self, amplitude: float) -> "SubjectProfile":
        sigs = {
            lab: tuple(Signature(s.channel, s.freq_hz, amplitude) for s in ss)
            for lab, ss in self.signatures.items()
        }
        return replace(self, signatures=sigs)

    def to_dict(self) -> dict:
        return {
            "signatures": {lab.name: [asdict(s) for s in ss] for lab, ss in self.signatures.items()},
            "alpha": self.alpha,
            "gains": list(self.gains),
            "noise_floor": self.noise_floor,
            "shared_weights": [list(w) for w in self.shared_weights],
            "shared_freq_hz": list(self.shared_freq_hz),
            "shared_amplitude": self.shared_amplitude,
            "shared_jitter": self.shared_jitter,
            "seed": self.seed,
        }


def make_profile(
    seed: int,
    channels_per_class: int = 2,
    amplitude: tuple[float, float] = (0.8, 1.2),
    alpha: float = 1.0,
    noise_floor: float = 0.5,
    shared_amplitude: float = 0.0,
    shared_jitter: float = 0.5,
    n_shared: int = 2,
) -> SubjectProfile:
    rng = np.random.default_rng([seed, 0x5EED])
    perm = rng.permutation(N_CHANNELS)
    sigs = {}
    for i, lab in enumerate((Label.LEFT, Label.RIGHT)):
        chans = np.sort(perm[i * channels_per_class : (i + 1) * channels_per_class])
        sigs[lab] = tuple(
            Signature(int(c), float(rng.uniform(8.0, 12.0)), float(rng.uniform(*amplitude))) for c in chans
        )
    sigs[Label.REST] = ()
    gains = tuple(float(g) for g in rng.uniform(0.8, 1.2, N_CHANNELS))
    shared = tuple(tuple(float(w) for w in rng.uniform(0.2, 1.0, N_CHANNELS)) for _ in range(n_shared))
    shared_freq = tuple(float(f) for f in rng.uniform(8.0, 12.0, n_shared))
    return SubjectProfile(
        sigs, alpha, gains, noise_floor, shared, shared_freq, shared_amplitude, shared_jitter, seed
    )


@dataclass(frozen=True)
class DriftParams:
    """Session-level distortion: ``gains * (mixing @ clean) + noise_scale * white``."""

    mixing: np.ndarray = field(default_factory=lambda: np.eye(N_CHANNELS))
    gains: np.ndarray = field(default_factory=lambda: np.ones(N_CHANNELS))
    noise_scale: float = 1.0
    freq_shift_hz: float = 0.0
    delta: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        mixing = np.asarray(self.mixing, dtype=np.float64)
        gains = np.asarray(self.gains, dtype=np.float64)
        if mixing.shape != (N_CHANNELS, N_CHANNELS):
            raise ValueError("mixing must be 8x8")
        if np.linalg.norm(mixing - np.eye(N_CHANNELS), 2) > self.delta + 1e-12:
            raise ValueError("mixing deviates from identity by more than delta")
        if abs(np.linalg.det(mixing)) < 1e-12:
            raise ValueError("mixing must be invertible")
        if np.any(gains <= 0):
            raise ValueError("gain multipliers must be positive")
        object.__setattr__(self, "mixing", mixing)
        object.__setattr__(self, "gains", gains)

    @classmethod
    def sample(
        cls,
        delta: float,
        gain_range: tuple[float, float] = (1.0, 1.0),
        noise_scale: float = 1.0,
        freq_jitter_hz: float = 0.0,
        seed: int = 0,
    ) -> "DriftParams":
        """Random drift with ``mixing = I + delta * Q``, Q a Haar-random orthogonal matrix.

        Every singular value of ``mixing - I`` equals ``delta``, so the
        perturbation is isotropic and the matrix is invertible for delta < 1.
        """
        if not 0 <= delta < 1:
            raise ValueError("delta must lie in [0, 1)")
        rng = np.random.default_rng([seed, 0xD1F7])
        q, r = np.linalg.qr(rng.standard_normal((N_CHANNELS, N_CHANNELS)))
        q = q * np.sign(np.diag(r))
        mixing = np.eye(N_CHANNELS) + delta * q
        lo, hi = gain_range
        gains = np.exp(rng.uniform(np.log(lo), np.log(hi), N_CHANNELS))
        shift = float(rng.uniform(-freq_jitter_hz, freq_jitter_hz)) if freq_jitter_hz else 0.0
        return cls(mixing, gains, noise_scale, shift, delta, seed)

    @classmethod
    def preset(cls, name: str, seed: int = 0) -> "DriftParams":
        if name not in DRIFT_PRESETS:
            raise KeyError(f"unknown drift preset {name!r}; choose from {sorted(DRIFT_PRESETS)}")
        return cls.sample(seed=seed, **DRIFT_PRESETS[name])

    def to_dict(self) -> dict:
        return {
            "mixing": self.mixing.tolist(),
            "gains": self.gains.tolist(),
            "noise_scale": self.noise_scale,
            "freq_shift_hz": self.freq_shift_hz,
            "delta": self.delta,
            "seed": self.seed,
        }


DRIFT_PRESETS = {
    "none": dict(delta=0.0, gain_range=(1.0, 1.0), noise_scale=1.0, freq_jitter_hz=0.0),
    "mild": dict(delta=0.1, gain_range=(0.8, 1.25), noise_scale=1.2, freq_jitter_hz=0.5),
    "strong": dict(delta=0.3, gain_range=(0.5, 2.0), noise_scale=1.5, freq_jitter_hz=1.0),
}


def pink_noise(rng: np.random.Generator, shape: tuple[int, ...], alpha: float) -> np.ndarray:
    """Unit-variance 1/f**alpha noise along the last axis."""
    n = shape[-1]
    spec = np.fft.rfft(rng.standard_normal(shape), axis=-1)
    f = np.fft.rfftfreq(n, d=1.0 / SAMPLE_RATE)
    shaping = np.zeros_like(f)
    shaping[1:] = f[1:] ** (-alpha / 2)
    x = np.fft.irfft(spec * shaping, n=n, axis=-1)
    return x / x.std(axis=-1, keepdims=True)


def instruction_envelope(rng: np.random.Generator, n: int = TRIAL_SAMPLES) -> np.ndarray:
    """Slowly amplitude-modulated gate: nonzero only on ``[0, INSTRUCTION_SAMPLES)``."""
    t = np.arange(n) / SAMPLE_RATE
    env = np.zeros(n)
    w = INSTRUCTION_SAMPLES
    am = 1.0 + 0.25 * np.sin(2 * np.pi * rng.uniform(0.3, 0.7) * t[:w] + rng.uniform(0, 2 * np.pi))
    ramp = np.ones(w)
    edge = 0.5 - 0.5 * np.cos(np.pi * np.arange(RAMP_SAMPLES) / RAMP_SAMPLES)
    ramp[:RAMP_SAMPLES] = edge
    ramp[-RAMP_SAMPLES:] = edge[::-1]
    env[:w] = am * ramp
    return env


def synth_trial(profile: SubjectProfile, drift: DriftParams, label: Label, seed) -> Trial:
    rng = np.random.default_rng(seed)
    label = Label(label)
    n = TRIAL_SAMPLES
    t = np.arange(n) / SAMPLE_RATE
    clean = pink_noise(rng, (N_CHANNELS, n), profile.alpha) * np.asarray(profile.gains)[:, None]
    env = instruction_envelope(rng, n)
    if profile.shared_amplitude > 0:
        for weights, f in zip(profile.shared_weights, profile.shared_freq_hz):
            amp = profile.shared_amplitude * np.exp(profile.shared_jitter * rng.standard_normal())
            idle = amp * np.sin(2 * np.pi * (f + drift.freq_shift_hz) * t + rng.uniform(0, 2 * np.pi))
            clean += np.outer(weights, idle)
    for sig in profile.signatures.get(label, ()):
        f = sig.freq_hz + drift.freq_shift_hz
        clean[sig.channel] += sig.amplitude * env * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    noise = rng.standard_normal((N_CHANNELS, n)) * profile.noise_floor * drift.noise_scale
    x = drift.gains[:, None] * (drift.mixing @ clean) + noise
    return Trial(label, x.astype(np.float32), cue_onset=0)


def trial_seed(session_seed: int, run: int, trial: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([session_seed, run, trial])


def synth_session(
    profile: SubjectProfile,
    drift: DriftParams,
    n_runs: int,
    seed: int,
    session_id: str | None = None,
) -> Session:
    if not MIN_RUNS <= n_runs <= MAX_RUNS:
        raise ValueError(f"n_runs must lie in [{MIN_RUNS}, {MAX_RUNS}], got {n_runs}")
    runs = []
    for r in range(n_runs):
        order = np.random.default_rng([seed, r, 0xF00D]).permutation(
            np.repeat([Label.LEFT, Label.RIGHT, Label.REST], TRIALS_PER_CLASS)
        )
        trials = [synth_trial(profile, drift, Label(lab), trial_seed(seed, r, i)) for i, lab in enumerate(order)]
        runs.append(Run(trials))
    session = Session(
        session_id=session_id or f"synth-{seed}",
        runs=runs,
        meta={
            "generator": {
                "seed": seed,
                "n_runs": n_runs,
                "profile": profile.to_dict(),
                "drift": drift.to_dict(),
            }
        },
    )
    session.validate()
    return session
