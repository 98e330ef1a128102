"""Embedded budget: MAC counts, latency/energy, battery life, and an 8-bit inference path."""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tinynet import BN_EPS, Model, NetConfig, _same_pad, softmax

INT32_MAX = 2**31 - 1


def count_macs(cfg: NetConfig) -> dict[str, int]:
    """Per-layer multiply-accumulates of one inference, plus ``total``.

    Batch norm folds into the preceding convolution and pooling only adds,
    so neither contributes. 'same' convolutions count every kernel tap.
    """
    C, T = cfg.n_channels, cfg.n_samples
    macs = {
        "temporal": cfg.F1 * C * T * cfg.L1,
        "spatial": cfg.F1 * cfg.D * C * T,
        "sep_depth": cfg.G * cfg.T1 * cfg.L2,
        "sep_point": cfg.G * cfg.G * cfg.T1,
        "dense": cfg.flat * cfg.n_classes,
    }
    macs["total"] = sum(macs.values())
    return macs


@dataclass(frozen=True)
class CostModel:
    """Budget constants, calibrated once against the default network and frozen.

    ``avg_power_w`` is the whole-system average at one inference every 100 ms.
    """

    mac_throughput: float = 400e6
    overhead_s: float = 0.7e-3
    active_power_w: float = 4.8e-3
    avg_power_w: float = 8e-3
    battery_mah: float = 65.0
    battery_v: float = 3.7

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v > 0 and k != "battery_mah":
                raise ValueError(f"CostModel.{k} must be positive")
        if self.battery_mah < 0:
            raise ValueError("battery capacity must be >= 0")


def estimate_inference(cost: CostModel, macs: int) -> tuple[float, float]:
    """(latency s, energy J) for one inference of ``macs`` multiply-accumulates."""
    latency = macs / cost.mac_throughput + cost.overhead_s
    return latency, cost.active_power_w * latency


def battery_life(cost: CostModel) -> float:
    """Hours of operation: stored energy (Wh) over average power (W)."""
    return cost.battery_mah * cost.battery_v / 1000.0 / cost.avg_power_w


def budget_report(cfg: NetConfig, cost: CostModel = CostModel()) -> dict:
    macs = count_macs(cfg)["total"]
    latency, energy = estimate_inference(cost, macs)
    return {
        "macs": macs,
        "latency_ms": latency * 1e3,
        "energy_uj": energy * 1e6,
        "avg_power_mw": cost.avg_power_w * 1e3,
        "battery_h": battery_life(cost),
    }


# -- 8-bit path ----------------------------------------------------------------------


@dataclass(frozen=True)
class QParams:
    scale: float
    zero_point: int
    qmin: int
    qmax: int

    def quantize(self, x: np.ndarray) -> np.ndarray:
        q = np.rint(np.asarray(x, dtype=np.float64) / self.scale) + self.zero_point
        return np.clip(q, self.qmin, self.qmax).astype(np.int32)

    def dequantize(self, q: np.ndarray) -> np.ndarray:
        return (q.astype(np.float64) - self.zero_point) * self.scale

    def centered(self, x: np.ndarray) -> np.ndarray:
        """Quantize and subtract the zero point: the integer operand of a MAC."""
        return self.quantize(x) - self.zero_point


def affine_qparams(lo: float, hi: float, signed: bool) -> QParams:
    """Per-tensor affine parameters; the range is widened to contain 0 so zero is exact."""
    qmin, qmax = (-128, 127) if signed else (0, 255)
    lo, hi = min(float(lo), 0.0), max(float(hi), 0.0)
    if hi == lo:
        hi = lo + 1e-8
    scale = (hi - lo) / (qmax - qmin)
    zp = int(np.clip(np.rint(qmin - lo / scale), qmin, qmax))
    return QParams(scale, zp, qmin, qmax)


def _weight_q(w: np.ndarray) -> tuple[np.ndarray, QParams]:
    qp = affine_qparams(w.min(), w.max(), signed=True)
    return qp.quantize(w), qp


def _fold_bn(model: Model, name: str) -> tuple[np.ndarray, np.ndarray]:
    p, b = model.params, model.buffers
    a = p[f"{name}.gamma"].astype(np.float64) / np.sqrt(b[f"{name}.var"].astype(np.float64) + BN_EPS)
    c = p[f"{name}.beta"].astype(np.float64) - a * b[f"{name}.mean"].astype(np.float64)
    return a, c


def _avgpool(x, p):
    t = x.shape[-1] // p
    return x[..., : t * p].reshape(*x.shape[:-1], t, p).mean(axis=-1)


@dataclass
class QuantModel:
    cfg: NetConfig
    weights: dict[str, np.ndarray]  # int8 codes stored as int32
    wq: dict[str, QParams]
    aq: dict[str, QParams]  # input quantizer of each integer stage
    bn: dict[str, tuple[np.ndarray, np.ndarray]]
    dense_bias: np.ndarray  # int32, in accumulator units of the dense stage


def _stages_float(model: Model, x: np.ndarray) -> dict[str, np.ndarray]:
    """Eval-mode forward in float64 with BN folded, exposing every integer stage's input."""
    cfg, p = model.cfg, {k: v.astype(np.float64) for k, v in model.params.items()}
    x = np.asarray(x, dtype=np.float64)
    out = {"temporal": x}
    win = sliding_window_view(_same_pad(x, cfg.L1), cfg.L1, axis=-1)
    z1 = np.einsum("bctk,fk->bfct", win, p["temporal.w"])
    a1, c1 = _fold_bn(model, "bn1")
    y1 = z1 * a1[None, :, None, None] + c1[None, :, None, None]
    out["spatial"] = y1
    z2 = np.einsum("fdc,bfct->bfdt", p["spatial.w"], y1).reshape(x.shape[0], cfg.G, -1)
    a2, c2 = _fold_bn(model, "bn2")
    r2 = np.maximum(z2 * a2[None, :, None] + c2[None, :, None], 0)
    h1 = _avgpool(r2, cfg.P1)
    out["sep_depth"] = h1
    win = sliding_window_view(_same_pad(h1, cfg.L2), cfg.L2, axis=-1)
    z3 = np.einsum("bgtk,gk->bgt", win, p["sep_depth.w"])
    out["sep_point"] = z3
    z4 = np.einsum("hg,bgt->bht", p["sep_point.w"], z3)
    a3, c3 = _fold_bn(model, "bn3")
    r4 = np.maximum(z4 * a3[None, :, None] + c3[None, :, None], 0)
    h2 = _avgpool(r4, cfg.P2).reshape(x.shape[0], -1)
    out["dense"] = h2
    out["logits"] = h2 @ p["dense.w"].T + p["dense.b"]
    return out


def quantize(model: Model, calibration: np.ndarray, min_epochs: int = 100, batch_size: int = 128) -> QuantModel:
    """Post-training per-tensor affine quantization with min/max activation calibration."""
    calibration = np.asarray(calibration)
    if len(calibration) == 0:
        raise ValueError("empty calibration set")
    if len(calibration) < min_epochs:
        raise ValueError(f"calibration needs >= {min_epochs} epochs, got {len(calibration)}")
    lo, hi = {}, {}
    for i in range(0, len(calibration), batch_size):
        acts = _stages_float(model, calibration[i : i + batch_size])
        for k in ("temporal", "spatial", "sep_depth", "sep_point", "dense"):
            lo[k] = min(lo.get(k, np.inf), float(acts[k].min()))
            hi[k] = max(hi.get(k, -np.inf), float(acts[k].max()))
    aq = {k: affine_qparams(lo[k], hi[k], signed=False) for k in lo}
    weights, wq = {}, {}
    for k in ("temporal", "spatial", "sep_depth", "sep_point", "dense"):
        weights[k], wq[k] = _weight_q(model.params[f"{k}.w"].astype(np.float64))
    bias_scale = aq["dense"].scale * wq["dense"].scale
    dense_bias = np.rint(model.params["dense.b"].astype(np.float64) / bias_scale).astype(np.int32)
    bn = {name: _fold_bn(model, name) for name in ("bn1", "bn2", "bn3")}
    return QuantModel(model.cfg, weights, wq, aq, bn, dense_bias)


def _audit(acc: np.ndarray, stage: str, report: dict | None) -> None:
    peak = int(np.abs(acc).max(initial=0))
    if report is not None:
        report[stage] = max(report.get(stage, 0), peak)
        if peak > INT32_MAX:
            raise OverflowError(f"{stage} accumulator {peak} exceeds int32")


def quantized_logits(q: QuantModel, x: np.ndarray, audit: dict | None = None) -> np.ndarray:
    """Integer MACs in int64 (checked against int32 in audit mode), float requantisation glue."""
    cfg = q.cfg
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    B = x.shape[0]
    w = {k: v.astype(np.int64) - q.wq[k].zero_point for k, v in q.weights.items()}

    def rescale(acc, stage):
        return acc.astype(np.float64) * (q.aq[stage].scale * q.wq[stage].scale)

    xi = q.aq["temporal"].centered(x).astype(np.int64)
    cols = sliding_window_view(_same_pad(xi, cfg.L1), cfg.L1, axis=-1).reshape(-1, cfg.L1)
    acc = (cols @ w["temporal"].T).reshape(B, cfg.n_channels, cfg.n_samples, cfg.F1)
    _audit(acc, "temporal", audit)
    a1, c1 = q.bn["bn1"]
    y1 = rescale(acc, "temporal") * a1 + c1  # (B, C, T, F1)

    yi = q.aq["spatial"].centered(y1).astype(np.int64)
    acc = np.einsum("bctf,fdc->bfdt", yi, w["spatial"]).reshape(B, cfg.G, cfg.n_samples)
    _audit(acc, "spatial", audit)
    a2, c2 = q.bn["bn2"]
    r2 = np.maximum(rescale(acc, "spatial") * a2[:, None] + c2[:, None], 0)
    h1 = _avgpool(r2, cfg.P1)

    hi = q.aq["sep_depth"].centered(h1).astype(np.int64)
    win = sliding_window_view(_same_pad(hi, cfg.L2), cfg.L2, axis=-1)
    acc = np.einsum("bgtk,gk->bgt", win, w["sep_depth"])
    _audit(acc, "sep_depth", audit)
    z3 = rescale(acc, "sep_depth")

    zi = q.aq["sep_point"].centered(z3).astype(np.int64)
    acc = np.einsum("hg,bgt->bht", w["sep_point"], zi)
    _audit(acc, "sep_point", audit)
    a3, c3 = q.bn["bn3"]
    r4 = np.maximum(rescale(acc, "sep_point") * a3[:, None] + c3[:, None], 0)
    h2 = _avgpool(r4, cfg.P2).reshape(B, -1)

    hi = q.aq["dense"].centered(h2).astype(np.int64)
    acc = hi @ w["dense"].T + q.dense_bias
    _audit(acc, "dense", audit)
    return rescale(acc, "dense")


def quantized_forward(q: QuantModel, x: np.ndarray, audit: dict | None = None):
    """(class, probabilities); batched input returns arrays."""
    single = np.ndim(x) == 2
    probs = softmax(quantized_logits(q, x, audit))
    cls = probs.argmax(axis=1)
    return (int(cls[0]), probs[0]) if single else (cls, probs)


def float_logits(model: Model, x: np.ndarray) -> np.ndarray:
    """Folded float64 reference of the eval-mode network (same stage order as the 8-bit path)."""
    return _stages_float(model, x)["logits"]
