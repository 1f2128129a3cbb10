"""Training losses for binary segmentation and their gradients w.r.t. the prediction.

All three losses return ``LossGradPair(value, gradient)`` where ``gradient``
holds dLoss/dP per voxel.  The Dice-style losses drop epsilon from the
gradient, so analytic and finite-difference gradients differ by O(epsilon).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from . import grid
from .errors import ConfigError, DegenerateAnnotationError, DomainError
from .rpmap import AnnotationSet, RewardPenaltyMap, build_rpmap


@dataclass(frozen=True)
class LossConfig:
    epsilon: float = 1e-7
    wcel_weight: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.epsilon < 0.01:
            raise ConfigError(f"epsilon must lie in (0, 0.01), got {self.epsilon}")
        if not self.wcel_weight > 0.0:
            raise ConfigError(f"wcel_weight must be positive, got {self.wcel_weight}")

    @property
    def clip_lo(self) -> float:
        return self.epsilon

    @property
    def clip_hi(self) -> float:
        return 1.0 - self.epsilon


class LossGradPair(NamedTuple):
    value: float
    gradient: np.ndarray


def _prepare(y, p):
    grid.check_same_shape(y, p)
    y = grid.as_mask(y).astype(np.float64)
    p = grid.as_grid(p)
    if p.min() < 0.0 or p.max() > 1.0:
        raise DomainError("predictions must be probabilities in [0, 1]")
    return y, p


def wcel(y, p, cfg: LossConfig = LossConfig()) -> LossGradPair:
    """Foreground-weighted binary cross-entropy, averaged over voxels."""
    y, p = _prepare(y, p)
    n = p.size
    w = cfg.wcel_weight
    pc = np.clip(p, cfg.clip_lo, cfg.clip_hi)
    per_voxel = w * y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)
    value = -grid.reduce_sum(per_voxel) / n
    grad = -(w * y / pc - (1.0 - y) / (1.0 - pc)) / n
    # hard clamp: no gradient where the clip is active
    grad[(p < cfg.clip_lo) | (p > cfg.clip_hi)] = 0.0
    return LossGradPair(value, grad)


def default_wcel_weight(masks) -> float:
    """Background-to-foreground voxel ratio over a collection of masks."""
    fg = 0
    total = 0
    for m in masks:
        m = grid.as_mask(m)
        fg += int(m.sum(dtype=np.int64))
        total += m.size
    if fg == 0:
        raise DegenerateAnnotationError("no foreground voxel in the training annotations")
    if fg == total:
        raise DegenerateAnnotationError("no background voxel in the training annotations")
    return (total - fg) / fg


def dice_loss(y, p, cfg: LossConfig = LossConfig()) -> LossGradPair:
    y, p = _prepare(y, p)
    eps = cfg.epsilon
    overlap = grid.reduce_sum(grid.hadamard(y, p))
    denom = grid.reduce_sum(y) + grid.reduce_sum(p)
    value = 1.0 - (2.0 * overlap + eps) / (denom + eps)
    if denom == 0.0:
        return LossGradPair(value, np.zeros_like(p))
    grad = 2.0 * (overlap - y * denom) / denom**2
    return LossGradPair(value, grad)


def rpdl(y, p, m: RewardPenaltyMap, cfg: LossConfig = LossConfig()) -> LossGradPair:
    """Dice loss weighted voxel-wise by a reward-penalty map.

    Overlap is weighted by the signed map, the denominator by its magnitude,
    so predicted mass on penalty voxels only inflates the denominator.
    """
    mv = m.values if isinstance(m, RewardPenaltyMap) else np.asarray(m, dtype=np.float64)
    grid.check_same_shape(y, p, mv)
    y, p = _prepare(y, p)
    mv = grid.as_grid(mv)
    eps = cfg.epsilon
    mabs = np.abs(mv)
    overlap = grid.reduce_sum(grid.hadamard(grid.hadamard(y, p), mv))
    denom = grid.reduce_sum(grid.hadamard(y, mabs)) + grid.reduce_sum(grid.hadamard(p, mabs))
    value = 1.0 - (2.0 * overlap + eps) / (denom + eps)
    if denom == 0.0:
        return LossGradPair(value, np.zeros_like(p))
    grad = 2.0 * (mabs * overlap - (y * mv) * denom) / denom**2
    return LossGradPair(value, grad)


LOSSES: dict[str, Callable] = {"wcel": wcel, "dl": dice_loss, "rpdl": rpdl}


def finite_diff_gradient(loss_fn, y, p, m=None, cfg: LossConfig = LossConfig(), h: float = 1e-5):
    """Central-difference gradient of ``loss_fn(...).value`` with respect to ``p``.

    Uses the epsilon-inclusive loss value; serves as the independent oracle
    for the analytic gradients above.
    """
    if not 1e-6 <= h <= 1e-3:
        raise ConfigError(f"step h must lie in [1e-6, 1e-3], got {h}")
    p = grid.as_grid(p).copy()
    if p.min() < h or p.max() > 1.0 - h:
        raise DomainError(f"predictions must lie in [{h}, {1 - h}] for step {h}")

    def value(q):
        out = loss_fn(y, q, cfg) if m is None else loss_fn(y, q, m, cfg)
        return out.value if isinstance(out, LossGradPair) else float(out)

    grad = np.empty_like(p)
    flat = p.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = value(p)
        flat[i] = orig - h
        down = value(p)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    """Max over entries of |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / scale))


def random_instance(rng, max_side: int = 8, p_range=(0.1, 0.9), max_annotators: int = 5):
    """Random ``(y, p, rpmap)`` triple: y is one annotation of a random set, the map is built from the set."""
    shape = tuple(int(s) for s in rng.integers(1, max_side + 1, 3))
    k = int(rng.integers(1, max_annotators + 1))
    masks = rng.random((k,) + shape) < rng.uniform(0.1, 0.6)
    masks[:, 0, 0, 0] = True  # every annotator marks something
    m = build_rpmap(AnnotationSet("rand", list(masks), [f"a{i}" for i in range(k)]))
    p = rng.uniform(p_range[0], p_range[1], shape)
    return masks[int(rng.integers(k))].astype(np.uint8), p, m


def gradcheck(kind: str, trials: int = 100, seed: int = 0, h: float = 1e-5, max_side: int = 8,
              cfg: LossConfig | None = None) -> list[float]:
    """Relative analytic-vs-finite-difference error of one loss on ``trials`` random instances."""
    if kind not in LOSSES:
        raise ConfigError(f"unknown loss kind {kind!r}")
    rng = np.random.default_rng(seed)
    errors = []
    for _ in range(trials):
        y, p, m = random_instance(rng, max_side)
        c = cfg or LossConfig(wcel_weight=float(rng.uniform(0.5, 50.0)))
        fn = LOSSES[kind]
        if kind == "rpdl":
            analytic = fn(y, p, m, c).gradient
            numeric = finite_diff_gradient(fn, y, p, m, c, h)
        else:
            analytic = fn(y, p, c).gradient
            numeric = finite_diff_gradient(fn, y, p, None, c, h)
        errors.append(relative_error(analytic, numeric))
    return errors
