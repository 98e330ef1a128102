"""Compact EEG CNN with hand-derived gradients, Adam and a binary checkpoint format.

Layer stack (EEGNet family)::

    temporal conv (F1 x L1, 'same') -> BN -> spatial depthwise (D per filter, all channels)
    -> BN -> ReLU -> avgpool P1 -> depthwise temporal (L2, 'same') -> pointwise
    -> BN -> ReLU -> avgpool P2 -> flatten -> dense

Convolutions carry no bias because a batch norm follows each of them.
"""
from __future__ import annotations

import copy
import io
import struct
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_MOMENTUM = 0.9
BN_EPS = 1e-5
MAX_PARAMS = 10_000


@dataclass(frozen=True)
class NetConfig:
    n_channels: int = 8
    n_samples: int = 950
    n_classes: int = 2
    F1: int = 8
    L1: int = 32
    D: int = 2
    L2: int = 16
    P1: int = 8
    P2: int = 8
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            if f.name != "seed" and getattr(self, f.name) <= 0:
                raise ValueError(f"NetConfig.{f.name} must be positive")
        if self.T2 < 1:
            raise ValueError(f"pooled time length is {self.T2}; need >= 1")

    @property
    def G(self) -> int:
        return self.F1 * self.D

    @property
    def T1(self) -> int:
        return self.n_samples // self.P1

    @property
    def T2(self) -> int:
        return self.T1 // self.P2

    @property
    def flat(self) -> int:
        return self.G * self.T2

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        G = self.G
        return {
            "temporal.w": (self.F1, self.L1),
            "bn1.gamma": (self.F1,),
            "bn1.beta": (self.F1,),
            "spatial.w": (self.F1, self.D, self.n_channels),
            "bn2.gamma": (G,),
            "bn2.beta": (G,),
            "sep_depth.w": (G, self.L2),
            "sep_point.w": (G, G),
            "bn3.gamma": (G,),
            "bn3.beta": (G,),
            "dense.w": (self.n_classes, self.flat),
            "dense.b": (self.n_classes,),
        }

    def buffer_shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "bn1.mean": (self.F1,),
            "bn1.var": (self.F1,),
            "bn2.mean": (self.G,),
            "bn2.var": (self.G,),
            "bn3.mean": (self.G,),
            "bn3.var": (self.G,),
        }

    def n_params(self) -> int:
        """Closed-form trainable parameter count."""
        G, C = self.G, self.n_channels
        return (
            self.F1 * self.L1
            + 2 * self.F1
            + self.F1 * self.D * C
            + 2 * G
            + G * self.L2
            + G * G
            + 2 * G
            + self.n_classes * self.flat
            + self.n_classes
        )

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class Model:
    cfg: NetConfig
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]

    @property
    def dtype(self):
        return self.params["temporal.w"].dtype

    def astype(self, dtype) -> "Model":
        return Model(
            self.cfg,
            {k: v.astype(dtype) for k, v in self.params.items()},
            {k: v.astype(dtype) for k, v in self.buffers.items()},
        )

    def copy(self) -> "Model":
        return Model(
            self.cfg,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def equals(self, other: "Model") -> bool:
        if self.cfg != other.cfg:
            return False
        mine = {**self.params, **self.buffers}
        theirs = {**other.params, **other.buffers}
        return mine.keys() == theirs.keys() and all(
            mine[k].dtype == theirs[k].dtype and mine[k].tobytes() == theirs[k].tobytes() for k in mine
        )


def init_model(cfg: NetConfig, dtype=np.float32) -> Model:
    """Fan-in scaled uniform weights, BN scale 1 / shift 0, running stats (0, 1)."""
    rng = np.random.default_rng([cfg.seed, 0x1417])
    params = {}
    for name, shape in cfg.param_shapes().items():
        if name.startswith("bn"):
            params[name] = np.ones(shape) if name.endswith("gamma") else np.zeros(shape)
        elif name == "dense.b":
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(3.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, shape)
    buffers = {k: (np.zeros(s) if k.endswith("mean") else np.ones(s)) for k, s in cfg.buffer_shapes().items()}
    model = Model(cfg, params, buffers)
    assert model.n_params() == cfg.n_params()
    return model.astype(dtype)


# -- layer primitives ----------------------------------------------------------------


def _same_pad(x: np.ndarray, k: int) -> np.ndarray:
    left = (k - 1) // 2
    pad = [(0, 0)] * (x.ndim - 1) + [(left, k - 1 - left)]
    return np.pad(x, pad)


def _bn_forward(x, gamma, beta, mean, var, axes, train, axis=1):
    shape = [1] * x.ndim
    shape[axis] = -1
    if train:
        mu = x.mean(axis=axes)
        v = x.var(axis=axes)
    else:
        mu, v = mean, var
    inv = 1.0 / np.sqrt(v + BN_EPS)
    xhat = (x - mu.reshape(shape)) * inv.reshape(shape)
    y = xhat * gamma.reshape(shape) + beta.reshape(shape)
    return y, (xhat, inv, mu, v)


def _bn_backward(dy, gamma, cache, axes, train, axis=1):
    xhat, inv, _, _ = cache
    shape = [1] * dy.ndim
    shape[axis] = -1
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    scale = (gamma * inv).reshape(shape)
    if not train:
        return dy * scale, dgamma, dbeta
    # sum(dxhat) == gamma * dbeta and sum(dxhat * xhat) == gamma * dgamma
    n = dy.size // dy.shape[axis]
    dx = dy - (dbeta / n).reshape(shape) - xhat * (dgamma / n).reshape(shape)
    dx *= scale
    return dx, dgamma, dbeta


def _avgpool(x, p):
    t = x.shape[-1] // p
    return x[..., : t * p].reshape(*x.shape[:-1], t, p).mean(axis=-1)


def _avgpool_backward(dy, p, t_in):
    dx = np.zeros(dy.shape[:-1] + (t_in,), dtype=dy.dtype)
    t = dy.shape[-1]
    dx[..., : t * p] = np.repeat(dy / p, p, axis=-1)
    return dx


def _count(counter, name, n):
    if counter is not None:
        counter[name] = counter.get(name, 0) + int(n)


def forward(
    model: Model,
    x: np.ndarray,
    train: bool = False,
    *,
    return_cache: bool = False,
    update_stats: bool = False,
    mac_counter: dict | None = None,
):
    """Logits ``(B, n_classes)``.

    ``train`` switches batch norm to batch statistics; ``update_stats`` then
    folds them into the running statistics. ``mac_counter`` accumulates
    multiply-accumulates per layer from the shapes actually contracted.
    """
    cfg, p, buf = model.cfg, model.params, model.buffers
    x = np.asarray(x, dtype=model.dtype)
    if x.ndim == 2:
        x = x[None]
    if x.shape[1:] != (cfg.n_channels, cfg.n_samples):
        raise ValueError(f"expected inputs (B, {cfg.n_channels}, {cfg.n_samples}), got {x.shape}")
    B, C, T = x.shape
    F1, D, G = cfg.F1, cfg.D, cfg.G
    stats = {}

    # temporal conv: every channel convolved with each of the F1 kernels; the
    # output is feature-major (F1, B, C, T) so normalisation and the spatial
    # matmul both run over contiguous memory
    cols = np.ascontiguousarray(sliding_window_view(_same_pad(x, cfg.L1), cfg.L1, axis=-1)).reshape(-1, cfg.L1)
    z1 = (p["temporal.w"] @ cols.T).reshape(F1, B, C, T)
    _count(mac_counter, "temporal", cols.shape[0] * cols.shape[1] * F1)
    y1, bn1 = _bn_forward(z1, p["bn1.gamma"], p["bn1.beta"], buf["bn1.mean"], buf["bn1.var"], (1, 2, 3), train, axis=0)
    stats["bn1"] = bn1

    # spatial depthwise: (D x C) per temporal filter
    z2 = np.matmul(p["spatial.w"][:, None], y1)
    z2 = np.ascontiguousarray(z2.transpose(1, 0, 2, 3)).reshape(B, G, T)
    _count(mac_counter, "spatial", B * F1 * D * C * T)
    y2, bn2 = _bn_forward(z2, p["bn2.gamma"], p["bn2.beta"], buf["bn2.mean"], buf["bn2.var"], (0, 2), train)
    stats["bn2"] = bn2
    r2 = np.maximum(y2, 0)
    a1 = _avgpool(r2, cfg.P1)

    # separable: depthwise temporal then pointwise
    win = sliding_window_view(_same_pad(a1, cfg.L2), cfg.L2, axis=-1)
    z3 = np.einsum("bgtk,gk->bgt", win, p["sep_depth.w"])
    _count(mac_counter, "sep_depth", B * G * cfg.T1 * cfg.L2)
    z4 = np.matmul(p["sep_point.w"][None], z3)
    _count(mac_counter, "sep_point", B * G * G * cfg.T1)
    y4, bn3 = _bn_forward(z4, p["bn3.gamma"], p["bn3.beta"], buf["bn3.mean"], buf["bn3.var"], (0, 2), train)
    stats["bn3"] = bn3
    r4 = np.maximum(y4, 0)
    a2 = _avgpool(r4, cfg.P2)

    h = a2.reshape(B, -1)
    logits = h @ p["dense.w"].T + p["dense.b"]
    _count(mac_counter, "dense", B * h.shape[1] * cfg.n_classes)

    if train and update_stats:
        for name, (_, _, mu, v) in stats.items():
            buf[f"{name}.mean"] = (BN_MOMENTUM * buf[f"{name}.mean"] + (1 - BN_MOMENTUM) * mu).astype(model.dtype)
            buf[f"{name}.var"] = (BN_MOMENTUM * buf[f"{name}.var"] + (1 - BN_MOMENTUM) * v).astype(model.dtype)

    if not return_cache:
        return logits
    cache = dict(
        train=train, cols=cols, y1=y1, z2=z2, y2=y2, a1=a1, win=win, z3=z3, y4=y4, a2=a2, h=h, stats=stats
    )
    return logits, cache


def backward(model: Model, cache: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    cfg, p = model.cfg, model.params
    train = cache["train"]
    B = dlogits.shape[0]
    C, T, F1, D, G = cfg.n_channels, cfg.n_samples, cfg.F1, cfg.D, cfg.G
    g = {}

    g["dense.w"] = dlogits.T @ cache["h"]
    g["dense.b"] = dlogits.sum(axis=0)
    da2 = (dlogits @ p["dense.w"]).reshape(cache["a2"].shape)

    dr4 = _avgpool_backward(da2, cfg.P2, cfg.T1)
    dy4 = dr4 * (cache["y4"] > 0)
    dz4, g["bn3.gamma"], g["bn3.beta"] = _bn_backward(dy4, p["bn3.gamma"], cache["stats"]["bn3"], (0, 2), train)

    g["sep_point.w"] = np.einsum("bgt,bht->gh", dz4, cache["z3"])
    dz3 = np.matmul(p["sep_point.w"].T[None], dz4)

    g["sep_depth.w"] = np.einsum("bgt,bgtk->gk", dz3, cache["win"])
    da1p = np.zeros(cache["a1"].shape[:-1] + (cfg.T1 + cfg.L2 - 1,), dtype=dz3.dtype)
    for k in range(cfg.L2):
        da1p[..., k : k + cfg.T1] += dz3 * p["sep_depth.w"][None, :, k, None]
    left = (cfg.L2 - 1) // 2
    da1 = da1p[..., left : left + cfg.T1]

    dr2 = _avgpool_backward(da1, cfg.P1, T)
    dy2 = dr2 * (cache["y2"] > 0)
    dz2, g["bn2.gamma"], g["bn2.beta"] = _bn_backward(dy2, p["bn2.gamma"], cache["stats"]["bn2"], (0, 2), train)

    dz2 = np.ascontiguousarray(dz2.reshape(B, F1, D, T).transpose(1, 0, 2, 3))
    y1 = cache["y1"]
    g["spatial.w"] = np.matmul(dz2, y1.transpose(0, 1, 3, 2)).sum(axis=1)
    dy1 = np.matmul(p["spatial.w"].transpose(0, 2, 1)[:, None], dz2)
    dz1, g["bn1.gamma"], g["bn1.beta"] = _bn_backward(
        dy1, p["bn1.gamma"], cache["stats"]["bn1"], (1, 2, 3), train, axis=0
    )
    dz1 = dz1.reshape(F1, -1)
    g["temporal.w"] = dz1 @ cache["cols"]
    return {k: g[k].astype(model.dtype, copy=False) for k in p}


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != logits.shape[:1]:
        raise ValueError("labels must be one per batch row")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= logits.shape[1]:
        raise ValueError("label out of range")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    n = logits.shape[0]
    loss = float(np.mean(logsum - z[np.arange(n), labels]))
    d = softmax(logits)
    d[np.arange(n), labels] -= 1
    return loss, d / n


def loss_and_grad(model: Model, x: np.ndarray, labels: np.ndarray, *, update_stats: bool = False, train: bool = True):
    logits, cache = forward(model, x, train=train, return_cache=True, update_stats=update_stats)
    loss, dlogits = cross_entropy(logits, labels)
    return loss, backward(model, cache, dlogits.astype(model.dtype)), logits


def predict(model: Model, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode class and probabilities; a single ``(C, T)`` epoch returns scalars."""
    single = np.ndim(x) == 2
    probs = softmax(forward(model, x, train=False).astype(np.float64))
    cls = probs.argmax(axis=1)
    return (int(cls[0]), probs[0]) if single else (cls, probs)


# -- Adam ----------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "AdamState":
        return replace(self, m={k: a.copy() for k, a in self.m.items()}, v={k: a.copy() for k, a in self.v.items()})


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
    """Bias-corrected Adam, in place on ``params`` and ``state``."""
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for k, theta in params.items():
        gk = grads[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(theta)
            state.v[k] = np.zeros_like(theta)
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * gk
        v *= state.beta2
        v += (1.0 - state.beta2) * (gk * gk)
        theta -= (state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(theta.dtype)


# -- training ------------------------------------------------------------------------


@dataclass
class Checkpoint:
    model: Model
    adam: AdamState | None = None
    epoch: int = 0
    tag: str = ""

    @property
    def cfg(self) -> NetConfig:
        return self.model.cfg

    def copy(self) -> "Checkpoint":
        return Checkpoint(self.model.copy(), self.adam.copy() if self.adam else None, self.epoch, self.tag)


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.train_loss)

    def to_dict(self) -> dict:
        return {k: list(v) for k, v in self.__dict__.items()}


def evaluate(model: Model, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> tuple[float, float]:
    """Eval-mode (loss, accuracy %)."""
    y = np.asarray(y)
    losses, correct = 0.0, 0
    for i in range(0, len(y), batch_size):
        logits = forward(model, x[i : i + batch_size]).astype(np.float64)
        loss, _ = cross_entropy(logits, y[i : i + batch_size])
        losses += loss * len(logits)
        correct += int((logits.argmax(axis=1) == y[i : i + batch_size]).sum())
    return losses / len(y), 100.0 * correct / len(y)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def train(
    start: Model | Checkpoint,
    x: np.ndarray,
    y: np.ndarray,
    *,
    val: tuple[np.ndarray, np.ndarray] | None = None,
    epochs: int = 500,
    batch_size: int = 64,
    lr: float = 1e-3,
    seed: int = 0,
    select: str = "final",
    adam: AdamState | None = None,
    tag: str = "",
    on_epoch=None,
) -> tuple[Checkpoint, History]:
    """Mini-batch Adam training.

    ``select="best_val"`` returns the earliest epoch with the highest
    validation accuracy; ``"final"`` returns the last epoch. The input model
    is never modified.
    """
    if len(y) == 0:
        raise ValueError("empty training set")
    if select not in ("final", "best_val"):
        raise ValueError(f"unknown selection rule {select!r}")
    if select == "best_val" and val is None:
        raise ValueError("best_val selection needs a validation set")
    if isinstance(start, Checkpoint):
        model, start_epoch = start.model.copy(), start.epoch
    else:
        model, start_epoch = start.copy(), 0
    x = np.asarray(x, dtype=model.dtype)
    y = np.asarray(y, dtype=np.int64)
    state = adam.copy() if adam is not None else AdamState(lr=lr)
    hist = History()
    best: Checkpoint | None = None
    best_acc = -1.0
    for ep in range(epochs):
        order = epoch_order(len(y), seed, ep)
        tot, hits = 0.0, 0
        for i in range(0, len(y), batch_size):
            idx = order[i : i + batch_size]
            loss, grads, logits = loss_and_grad(model, x[idx], y[idx], update_stats=True)
            adam_step(state, model.params, grads)
            tot += loss * len(idx)
            hits += int((logits.argmax(axis=1) == y[idx]).sum())
        hist.train_loss.append(tot / len(y))
        hist.train_acc.append(100.0 * hits / len(y))
        if val is not None:
            vl, va = evaluate(model, *val)
            hist.val_loss.append(vl)
            hist.val_acc.append(va)
            if select == "best_val" and va > best_acc:
                best_acc = va
                best = Checkpoint(model.copy(), state.copy(), start_epoch + ep + 1, tag)
        if on_epoch is not None:
            on_epoch(ep, hist)
    if select == "best_val" and best is not None:
        return best, hist
    return Checkpoint(model, state, start_epoch + epochs, tag), hist


# -- checkpoint file -----------------------------------------------------------------

CKPT_MAGIC = b"BMCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


_CFG_FIELDS = [f.name for f in fields(NetConfig)]


def _write_blob(out, arr: np.ndarray) -> None:
    out.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_blob(buf, shape) -> np.ndarray:
    n = int(np.prod(shape))
    raw = buf.read(4 * n)
    if len(raw) != 4 * n:
        raise CheckpointError("truncated checkpoint")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Layout: magic, u32 version, config as u32 count + i64 values, parameters then
    running statistics as float32 in declared order, u8 Adam flag [+ Adam blob],
    u32 epoch counter, u16-prefixed UTF-8 tag."""
    cfg = ckpt.cfg
    out = io.BytesIO()
    out.write(CKPT_MAGIC)
    out.write(struct.pack("<I", CKPT_VERSION))
    out.write(struct.pack("<I", len(_CFG_FIELDS)))
    for name in _CFG_FIELDS:
        out.write(struct.pack("<q", getattr(cfg, name)))
    for name in cfg.param_shapes():
        _write_blob(out, ckpt.model.params[name])
    for name in cfg.buffer_shapes():
        _write_blob(out, ckpt.model.buffers[name])
    if ckpt.adam is None:
        out.write(b"\x00")
    else:
        a = ckpt.adam
        out.write(b"\x01")
        out.write(struct.pack("<Q4d", a.t, a.lr, a.beta1, a.beta2, a.eps))
        has_moments = bool(a.m)
        out.write(struct.pack("<B", has_moments))
        if has_moments:
            for name in cfg.param_shapes():
                _write_blob(out, a.m[name])
                _write_blob(out, a.v[name])
    out.write(struct.pack("<I", ckpt.epoch))
    tag = ckpt.tag.encode("utf-8")
    out.write(struct.pack("<H", len(tag)))
    out.write(tag)
    Path(path).write_bytes(out.getvalue())


def load_checkpoint(path: str | Path) -> Checkpoint:
    buf = io.BytesIO(Path(path).read_bytes())
    if buf.read(4) != CKPT_MAGIC:
        raise CheckpointError("bad checkpoint magic")

    def unpack(fmt):
        size = struct.calcsize(fmt)
        raw = buf.read(size)
        if len(raw) != size:
            raise CheckpointError("truncated checkpoint")
        return struct.unpack(fmt, raw)

    (version,) = unpack("<I")
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n_fields,) = unpack("<I")
    if n_fields != len(_CFG_FIELDS):
        raise CheckpointError("config field count mismatch")
    cfg = NetConfig(**{name: unpack("<q")[0] for name in _CFG_FIELDS})
    params = {name: _read_blob(buf, shape) for name, shape in cfg.param_shapes().items()}
    buffers = {name: _read_blob(buf, shape) for name, shape in cfg.buffer_shapes().items()}
    (flag,) = unpack("<B")
    adam = None
    if flag:
        t, lr, b1, b2, eps = unpack("<Q4d")
        adam = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps, t=t)
        (has_moments,) = unpack("<B")
        if has_moments:
            for name, shape in cfg.param_shapes().items():
                adam.m[name] = _read_blob(buf, shape)
                adam.v[name] = _read_blob(buf, shape)
    (epoch,) = unpack("<I")
    (n,) = unpack("<H")
    tag = buf.read(n).decode("utf-8")
    if buf.read(1):
        raise CheckpointError("trailing bytes in checkpoint")
    return Checkpoint(Model(cfg, params, buffers), adam, epoch, tag)


def fresh_adam(ckpt: Checkpoint, lr: float = 1e-3) -> AdamState:
    """Optimizer state to use when a checkpoint carries none (t = 0)."""
    return copy.deepcopy(ckpt.adam) if ckpt.adam is not None else AdamState(lr=lr)
