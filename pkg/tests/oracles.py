"""Independent reference computations used by the test-suite."""
import numpy as np
from scipy.signal import welch

from bmitl.tinynet import forward, loss_and_grad


def band_power(x, fs, lo=8.0, hi=12.0, nperseg=None):
    """Mean Welch PSD in [lo, hi] Hz along the last axis."""
    f, p = welch(x, fs=fs, nperseg=nperseg or min(x.shape[-1], int(fs)), axis=-1)
    return p[..., (f >= lo) & (f <= hi)].mean(axis=-1)


def _relu_pattern(model, x):
    _, cache = forward(model, x, train=True, return_cache=True)
    return np.concatenate([(cache["y2"] > 0).ravel(), (cache["y4"] > 0).ravel()])


def finite_difference_check(model, x, y, step=1e-3, floor=1e-6):
    """Central differences against the analytic gradient of every parameter.

    Returns ``(max_rel_err, n_checked, n_skipped)``. The relative error of a
    tensor is ||analytic - numeric|| / max(||analytic||, ||numeric||, floor)
    over its elements; elements whose +/-step stencil flips any ReLU are
    skipped because the finite difference is not a derivative there.
    """
    _, grads, _ = loss_and_grad(model, x, y)
    worst, checked, skipped = 0.0, 0, 0
    for name, theta in model.params.items():
        ana, num = [], []
        for idx in np.ndindex(theta.shape):
            orig = theta[idx]
            theta[idx] = orig + step
            lp, _, _ = loss_and_grad(model, x, y)
            sp = _relu_pattern(model, x)
            theta[idx] = orig - step
            lm, _, _ = loss_and_grad(model, x, y)
            sm = _relu_pattern(model, x)
            theta[idx] = orig
            if np.any(sp != sm):
                skipped += 1
                continue
            ana.append(grads[name][idx])
            num.append((lp - lm) / (2 * step))
        if not ana:
            continue
        ana, num = np.asarray(ana), np.asarray(num)
        denom = max(np.linalg.norm(ana), np.linalg.norm(num), floor)
        worst = max(worst, float(np.linalg.norm(ana - num) / denom))
        checked += len(ana)
    return worst, checked, skipped


def brute_force_conv1d(x, w):
    """'same' cross-correlation by explicit loops; x (T,), w (L,)."""
    L = len(w)
    left = (L - 1) // 2
    xp = np.concatenate([np.zeros(left), x, np.zeros(L - 1 - left)])
    return np.array([sum(w[k] * xp[t + k] for k in range(L)) for t in range(len(x))])
