"""A tiny fully convolutional segmentation net with hand-written backprop.

Architecture (zero-padded "same" convolutions, single input channel)::

    conv 3x3x3 (1 -> C) -> LeakyReLU -> conv 3x3x3 (C -> C) -> LeakyReLU
        -> conv 1x1x1 (C -> 1) -> sigmoid

Convolutions are computed as im2col followed by a matmul, a couple of depth
slices at a time so the column buffer stays in cache.  Parameters live in a plain
dict of arrays so the optimizer and the gradient checker can treat them
uniformly.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import grid
from .errors import ConfigError, DimensionError, NumericalError

PARAM_ORDER = ("w1", "b1", "w2", "b2", "w3", "b3")
_OFFSETS = [(a, b, c) for a in range(3) for b in range(3) for c in range(3)]


@dataclass
class TinySegNet:
    params: dict
    leaky_slope: float = 0.3
    input_shape: tuple | None = None
    # arithmetic precision of forward/backward; parameters are always stored as float64
    compute_dtype: str = "float64"

    @classmethod
    def init(cls, seed: int = 0, channels: int = 8, leaky_slope: float = 0.3, input_shape=None,
             compute_dtype: str = "float64"):
        """He-normal weights (leaky-ReLU gain), zero biases."""
        rng = np.random.default_rng(seed)
        gain = 2.0 / (1.0 + leaky_slope**2)
        params = {
            "w1": rng.normal(0.0, np.sqrt(gain / 27), (channels, 1, 3, 3, 3)),
            "b1": np.zeros(channels),
            "w2": rng.normal(0.0, np.sqrt(gain / (27 * channels)), (channels, channels, 3, 3, 3)),
            "b2": np.zeros(channels),
            "w3": rng.normal(0.0, np.sqrt(1.0 / channels), (1, channels, 1, 1, 1)),
            "b3": np.zeros(1),
        }
        shape = None if input_shape is None else tuple(grid.GridShape.of(input_shape))
        return cls(params, leaky_slope, shape, compute_dtype)

    @property
    def channels(self) -> int:
        return self.params["w1"].shape[0]

    @property
    def num_parameters(self) -> int:
        return sum(self.params[k].size for k in PARAM_ORDER)

    def copy(self) -> "TinySegNet":
        return TinySegNet(copy.deepcopy(self.params), self.leaky_slope, self.input_shape, self.compute_dtype)

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in PARAM_ORDER])

    def with_flat_parameters(self, flat) -> "TinySegNet":
        flat = np.asarray(flat, dtype=np.float64).ravel()
        if flat.size != self.num_parameters:
            raise DimensionError(f"expected {self.num_parameters} parameters, got {flat.size}")
        params, i = {}, 0
        for k in PARAM_ORDER:
            ref = self.params[k]
            params[k] = flat[i : i + ref.size].reshape(ref.shape).copy()
            i += ref.size
        return TinySegNet(params, self.leaky_slope, self.input_shape, self.compute_dtype)


_SLAB = 2  # depth slices per im2col chunk; keeps the column buffer cache-resident


def _pad(x):
    c, d, h, w = x.shape
    xp = np.zeros((c, d + 2, h + 2, w + 2), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, 1:-1] = x
    return xp


def _cols(xp, s, n):
    """im2col of output depth slices ``s:s+n`` from the padded input ``xp``."""
    c, _, hp, wp = xp.shape
    h, w = hp - 2, wp - 2
    cols = np.empty((c, 27, n, h, w), dtype=xp.dtype)
    for k, (a, b, e) in enumerate(_OFFSETS):
        cols[:, k] = xp[:, s + a : s + a + n, b : b + h, e : e + w]
    return cols.reshape(c * 27, n * h * w)


def _conv(xp, wm, bias):
    """'Same' 3x3x3 convolution of padded input; returns (C_out, D*H*W)."""
    _, dp, hp, wp = xp.shape
    d, hw = dp - 2, (hp - 2) * (wp - 2)
    out = np.empty((wm.shape[0], d * hw), dtype=xp.dtype)
    for s in range(0, d, _SLAB):
        n = min(_SLAB, d - s)
        out[:, s * hw : (s + n) * hw] = wm @ _cols(xp, s, n)
    out += bias[:, None]
    return out


def _conv_backward(xp, wm, g, need_input=True):
    """Weight gradient and (optionally) input gradient of :func:`_conv`."""
    c, dp, hp, wp = xp.shape
    d, h, w = dp - 2, hp - 2, wp - 2
    hw = h * w
    dw = np.zeros_like(wm)
    dxp = np.zeros_like(xp) if need_input else None
    for s in range(0, d, _SLAB):
        n = min(_SLAB, d - s)
        gs = g[:, s * hw : (s + n) * hw]
        dw += gs @ _cols(xp, s, n).T
        if need_input:
            dc = (wm.T @ gs).reshape(c, 27, n, h, w)
            for k, (a, b, e) in enumerate(_OFFSETS):
                dxp[:, s + a : s + a + n, b : b + h, e : e + w] += dc[:, k]
    dx = None if dxp is None else dxp[:, 1:-1, 1:-1, 1:-1].reshape(c, -1)
    return dw, dx


def _leaky(z, slope):
    return np.where(z > 0, z, slope * z)


def _forward(net: TinySegNet, x, dropout=None):
    """Forward pass keeping every intermediate needed by ``_backward``.

    ``dropout`` is an optional ``(rng, rate)`` pair; masks use inverted scaling.
    """
    dt = np.dtype(net.compute_dtype)
    p = {k: v.astype(dt, copy=False) for k, v in net.params.items()}
    s = dt.type(net.leaky_slope)
    x = x.astype(dt, copy=False)
    shape = x.shape
    n = x.size
    xp1 = _pad(x[None])
    z1 = _conv(xp1, p["w1"].reshape(net.channels, -1), p["b1"])
    a1 = _leaky(z1, s)
    drop1 = drop2 = None
    if dropout is not None and dropout[1] > 0:
        rng, rate = dropout
        drop1 = ((rng.random(a1.shape) >= rate) / (1.0 - rate)).astype(dt)
        a1 = a1 * drop1
    xp2 = _pad(a1.reshape((net.channels,) + shape))
    z2 = _conv(xp2, p["w2"].reshape(net.channels, -1), p["b2"])
    a2 = _leaky(z2, s)
    if dropout is not None and dropout[1] > 0:
        rng, rate = dropout
        drop2 = ((rng.random(a2.shape) >= rate) / (1.0 - rate)).astype(dt)
        a2 = a2 * drop2
    z3 = p["w3"].reshape(1, -1) @ a2 + p["b3"][:, None]
    prob = expit(z3).reshape(shape)
    cache = dict(shape=shape, n=n, xp1=xp1, z1=z1, xp2=xp2, z2=z2, a2=a2,
                 drop1=drop1, drop2=drop2, prob=prob, params=p)
    return prob.astype(np.float64), cache


def _backward(net: TinySegNet, cache, d_prob):
    p = cache["params"]
    prob = cache["prob"]
    s = prob.dtype.type(net.leaky_slope)
    ch = net.channels
    g3 = (d_prob.astype(prob.dtype) * prob * (1 - prob)).reshape(1, -1)
    grads = {
        "w3": (g3 @ cache["a2"].T).reshape(p["w3"].shape),
        "b3": g3.sum(axis=1),
    }
    g2 = p["w3"].reshape(1, -1).T @ g3
    if cache["drop2"] is not None:
        g2 = g2 * cache["drop2"]
    g2 = g2 * np.where(cache["z2"] > 0, 1.0, s)
    dw2, g1 = _conv_backward(cache["xp2"], p["w2"].reshape(ch, -1), g2)
    grads["w2"] = dw2.reshape(p["w2"].shape)
    grads["b2"] = g2.sum(axis=1)
    if cache["drop1"] is not None:
        g1 = g1 * cache["drop1"]
    g1 = g1 * np.where(cache["z1"] > 0, 1.0, s)
    dw1, _ = _conv_backward(cache["xp1"], p["w1"].reshape(ch, -1), g1, need_input=False)
    grads["w1"] = dw1.reshape(p["w1"].shape)
    grads["b1"] = g1.sum(axis=1)
    return {k: g.astype(np.float64) for k, g in grads.items()}


def _check_input(net: TinySegNet, x):
    x = grid.as_grid(x)
    if net.input_shape is not None and tuple(x.shape) != tuple(net.input_shape):
        raise DimensionError(f"net expects input {tuple(net.input_shape)}, got {x.shape}")
    return x


def forward(net: TinySegNet, x) -> np.ndarray:
    """Probability volume in (0, 1) with the same shape as ``x``."""
    return _forward(net, _check_input(net, x))[0]


def backward(net: TinySegNet, x, dL_dP) -> dict:
    """Parameter gradients given the loss gradient w.r.t. the output probabilities."""
    x = _check_input(net, x)
    dL_dP = grid.as_grid(dL_dP)
    grid.check_same_shape(x, dL_dP)
    _, cache = _forward(net, x)
    return _backward(net, cache, dL_dP)


def finite_diff_parameters(net: TinySegNet, x, loss_value, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss_value(forward(net, x))`` w.r.t. every parameter, in flat order."""
    x = _check_input(net, x)
    flat = net.flat_parameters()
    out = np.empty_like(flat)
    for i in range(flat.size):
        up, down = flat.copy(), flat.copy()
        up[i] += h
        down[i] -= h
        f_up = loss_value(forward(net.with_flat_parameters(up), x))
        f_down = loss_value(forward(net.with_flat_parameters(down), x))
        out[i] = (f_up - f_down) / (2.0 * h)
    return out


def flatten_grads(grads: dict) -> np.ndarray:
    return np.concatenate([grads[k].ravel() for k in PARAM_ORDER])


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in params.items()},
                   {k: np.zeros_like(a) for k, a in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {k!r}")
    t = state.t + 1
    new_params, m_new, v_new = {}, {}, {}
    for k, a in params.items():
        g = grads[k]
        m_new[k] = beta1 * state.m[k] + (1.0 - beta1) * g
        v_new[k] = beta2 * state.v[k] + (1.0 - beta2) * g * g
        m_hat = m_new[k] / (1.0 - beta1**t)
        v_hat = v_new[k] / (1.0 - beta2**t)
        new_params[k] = a - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_params, AdamState(m_new, v_new, t)


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class TrainSchedule:
    initial_lr: float = 1e-4
    plateau_factor: float = 0.1
    plateau_patience: int = 10
    early_stop_patience: int = 20
    max_epochs: int = 200
    batch_size: int = 4
    validation_fraction: float = 0.1
    dropout_rate: float = 0.0
    rng_seed: int = 0
    augmentation: str = "full"  # "full" (48 cube symmetries), "mirror" (8) or "none"

    def __post_init__(self):
        if not 0.0 < self.plateau_factor < 1.0:
            raise ConfigError("plateau_factor must lie in (0, 1)")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ConfigError("patiences must be at least 1")
        if not 0.0 < self.validation_fraction < 0.5:
            raise ConfigError("validation_fraction must lie in (0, 0.5)")
        if self.max_epochs < 0 or self.batch_size < 1:
            raise ConfigError("max_epochs must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if not self.initial_lr >= 0.0:
            raise ConfigError("initial_lr must be nonnegative")
        if self.augmentation not in ("full", "mirror", "none"):
            raise ConfigError(f"unknown augmentation {self.augmentation!r}")


class PlateauDecay:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, lr: float, factor: float, patience: int):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.best = np.inf
        self.wait = 0

    def step(self, val_loss: float) -> bool:
        """Record one epoch; returns True when the rate was just decayed."""
        if val_loss < self.best:
            self.best = val_loss
            self.wait = 0
            return False
        self.wait += 1
        if self.wait >= self.patience:
            self.lr *= self.factor
            self.wait = 0
            return True
        return False


class EarlyStopping:
    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = -1
        self.wait = 0

    def step(self, val_loss: float, epoch: int) -> bool:
        """Returns True when training should stop after this epoch."""
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = epoch
            self.wait = 0
            return False
        self.wait += 1
        return self.wait >= self.patience


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class TrainedModel:
    net: TinySegNet
    best_epoch: int
    history: list = field(default_factory=list)
    loss_kind: str = ""
    schedule: TrainSchedule | None = None
    wcel_weight: float | None = None
