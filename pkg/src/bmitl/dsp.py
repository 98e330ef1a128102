"""Preprocessing chain: 50 Hz notch, 4th-order Butterworth band-pass, decimation, epoching."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import signal as sps

from .dataio import Label, SAMPLE_RATE, Trial

EPOCH_RAW_SAMPLES = 1900
DECIMATION = 2
EPOCH_SAMPLES = EPOCH_RAW_SAMPLES // DECIMATION
VARIANCE_FLOOR = 1e-12
POLE_MARGIN = 1e-9


class FilterDesignError(ValueError):
    pass


@dataclass(frozen=True)
class BiquadCascade:
    """Second-order sections, one row per section: ``b0 b1 b2 1 a1 a2``."""

    sos: np.ndarray
    fs: float

    def __post_init__(self):
        sos = np.array(self.sos, dtype=np.float64).reshape(-1, 6)
        if not np.allclose(sos[:, 3], 1.0):
            raise FilterDesignError("sections must be normalised so a0 == 1")
        sos.setflags(write=False)
        object.__setattr__(self, "sos", sos)
        if not self.is_stable():
            raise FilterDesignError(f"unstable cascade, pole radius {self.max_pole_radius():.12f}")

    @property
    def n_sections(self) -> int:
        return self.sos.shape[0]

    def poles(self) -> np.ndarray:
        return np.concatenate([np.roots(row[3:]) for row in self.sos])

    def max_pole_radius(self) -> float:
        return float(np.max(np.abs(self.poles()))) if self.n_sections else 0.0

    def is_stable(self) -> bool:
        return self.max_pole_radius() < 1.0 - POLE_MARGIN


def freq_response(cascade: BiquadCascade, freq) -> np.ndarray:
    """Complex gain of the cascade at ``freq`` Hz (scalar or array)."""
    freq = np.asarray(freq, dtype=np.float64)
    if np.any(freq < 0) or np.any(freq > cascade.fs / 2):
        raise ValueError("freq must lie in [0, fs/2]")
    zinv = np.exp(-2j * np.pi * freq / cascade.fs)
    h = np.ones_like(zinv)
    for b0, b1, b2, a0, a1, a2 in cascade.sos:
        h = h * (b0 + b1 * zinv + b2 * zinv**2) / (a0 + a1 * zinv + a2 * zinv**2)
    return h


def design_notch(f0: float, fs: float = SAMPLE_RATE, quality: float = 30.0) -> BiquadCascade:
    """Single-biquad notch with zeros on the unit circle at ``f0``."""
    if not 0 < f0 < fs / 2:
        raise FilterDesignError(f"notch frequency {f0} outside (0, {fs / 2})")
    if quality <= 0:
        raise FilterDesignError("quality factor must be positive")
    w0 = 2 * math.pi * f0 / fs
    alpha = math.sin(w0) / (2 * quality)
    c = math.cos(w0)
    a0 = 1 + alpha
    sos = [1 / a0, -2 * c / a0, 1 / a0, 1.0, -2 * c / a0, (1 - alpha) / a0]
    return BiquadCascade(np.array([sos]), fs)


def _butter_prototype(n: int) -> np.ndarray:
    k = np.arange(1, n + 1)
    return np.exp(1j * np.pi * (2 * k + n - 1) / (2 * n))


def design_bandpass(f_lo: float, f_hi: float, order: int = 4, fs: float = SAMPLE_RATE) -> BiquadCascade:
    """Butterworth band-pass of total order ``order`` (order/2 sections).

    Analog prototype -> band-pass transform at pre-warped edges -> bilinear
    transform; each section takes one conjugate pole pair and the zeros {+1, -1}.
    """
    if not 0 < f_lo < f_hi < fs / 2:
        raise FilterDesignError(f"band edges must satisfy 0 < f_lo < f_hi < {fs / 2}, got ({f_lo}, {f_hi})")
    if order < 2 or order % 2:
        raise FilterDesignError("band-pass order must be a positive even number")
    n = order // 2
    fs2 = 2.0 * fs
    w_lo = fs2 * math.tan(math.pi * f_lo / fs)
    w_hi = fs2 * math.tan(math.pi * f_hi / fs)
    bw = w_hi - w_lo
    w0sq = w_lo * w_hi

    proto = _butter_prototype(n)
    disc = np.sqrt((proto * bw) ** 2 - 4 * w0sq + 0j)
    s_poles = np.concatenate([(proto * bw + disc) / 2, (proto * bw - disc) / 2])
    z_poles = (fs2 + s_poles) / (fs2 - s_poles)
    # n analog zeros at s=0 map to z=1, n zeros at infinity map to z=-1
    gain = bw**n * np.real(fs2**n / np.prod(fs2 - s_poles))

    upper = z_poles[np.imag(z_poles) > 0]
    upper = upper[np.argsort(np.abs(upper))]
    if len(upper) != n:
        raise FilterDesignError("expected complex-conjugate pole pairs")
    section_gain = abs(gain) ** (1.0 / n)
    rows = []
    for i, p in enumerate(upper):
        g = section_gain * (np.sign(gain) if i == 0 else 1.0)
        rows.append([g, 0.0, -g, 1.0, -2 * p.real, abs(p) ** 2])
    return BiquadCascade(np.array(rows), fs)


def filter_apply(x: np.ndarray, cascade: BiquadCascade) -> np.ndarray:
    """Causal filtering along the last axis from zero initial state, in float64."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input")
    return sps.sosfilt(np.array(cascade.sos), x, axis=-1)


def filter_reference(x: np.ndarray, cascade: BiquadCascade) -> np.ndarray:
    """Plain direct-form I loop; slow, used to cross-check :func:`filter_apply`."""
    y = np.asarray(x, dtype=np.float64)
    for b0, b1, b2, _, a1, a2 in cascade.sos:
        inp = y
        out = np.zeros_like(inp)
        x1 = x2 = y1 = y2 = np.zeros(inp.shape[:-1])
        for n in range(inp.shape[-1]):
            xn = inp[..., n]
            yn = b0 * xn + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2
            out[..., n] = yn
            x2, x1 = x1, xn
            y2, y1 = y1, yn
        y = out
    return y


def downsample(x: np.ndarray, factor: int) -> np.ndarray:
    if factor < 1:
        raise ValueError("downsampling factor must be >= 1")
    return x[..., ::factor]


def standardize(x: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-variance per channel (last axis); constant channels map to zeros."""
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    scale = np.where(var > VARIANCE_FLOOR, 1.0 / np.sqrt(np.maximum(var, VARIANCE_FLOOR)), 0.0)
    return centered * scale


@dataclass(frozen=True)
class Preprocessor:
    notch: BiquadCascade = field(default_factory=lambda: design_notch(50.0, SAMPLE_RATE, 30.0))
    bandpass: BiquadCascade = field(default_factory=lambda: design_bandpass(0.5, 100.0, 4, SAMPLE_RATE))
    window: int = EPOCH_RAW_SAMPLES
    factor: int = DECIMATION

    @property
    def n_samples(self) -> int:
        return len(range(0, self.window, self.factor))


@dataclass
class EpochTensor:
    data: np.ndarray
    label: Label

    def __post_init__(self):
        if self.data.shape != (8, EPOCH_SAMPLES):
            raise ValueError(f"epoch must be 8x{EPOCH_SAMPLES}, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("epoch contains non-finite values")


def preprocess_batch(samples: np.ndarray, cue_onsets, pre: Preprocessor | None = None) -> np.ndarray:
    """Vectorised chain for stacked trials ``(n, 8, n_raw)`` -> ``(n, 8, 950)`` float32."""
    pre = pre or Preprocessor()
    samples = np.asarray(samples)
    cue_onsets = np.broadcast_to(np.asarray(cue_onsets, dtype=np.int64), samples.shape[:1])
    if np.any(cue_onsets + pre.window > samples.shape[-1]):
        raise ValueError(f"trial too short for a {pre.window}-sample window")
    stop = int(cue_onsets.max()) + pre.window
    y = filter_apply(samples[..., :stop], pre.notch)
    y = filter_apply(y, pre.bandpass)
    idx = cue_onsets[:, None] + np.arange(pre.window)[None, :]
    y = np.take_along_axis(y, idx[:, None, :], axis=-1)
    y = standardize(downsample(y, pre.factor))
    return y.astype(np.float32)


def preprocess_trial(trial: Trial, pre: Preprocessor | None = None) -> EpochTensor:
    if trial.label == Label.REST:
        raise ValueError("only Left/Right trials are epoched")
    data = preprocess_batch(trial.samples[None], [trial.cue_onset], pre)[0]
    return EpochTensor(data, trial.label)
