"""Mini-batch training of :class:`TinySegNet` on (image, annotation) pairs.

One epoch visits every training image once, paired with one of its
training annotations drawn uniformly at random, under a random element of
the augmentation group.  The validation loss (same loss kind, no
augmentation) drives learning-rate decay and early stopping; the returned
model carries the best-validation parameters.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import grid, volio
from .errors import ConfigError, FormatError, TrainingDivergedError
from .loss import LossConfig, default_wcel_weight, dice_loss, rpdl, wcel
from .model import (
    PARAM_ORDER,
    AdamState,
    EarlyStopping,
    EpochRecord,
    PlateauDecay,
    TinySegNet,
    TrainedModel,
    TrainSchedule,
    _backward,
    _forward,
    adam_step,
)
from .rpmap import build_rpmap

log = logging.getLogger(__name__)

LOSS_KINDS = ("wcel", "dl", "rpdl")


def _augmentations(kind: str, shape) -> list:
    if kind == "none":
        return [grid.AugmentOp.identity()]
    if kind == "mirror":
        return grid.mirror_group()
    if len(set(shape)) != 1:
        raise ConfigError(f"rotation augmentation needs cubic volumes, got {tuple(shape)}")
    return grid.augmentation_group()


def loss_value_and_grad(kind, y, prob, m, cfg):
    if kind == "wcel":
        return wcel(y, prob, cfg)
    if kind == "dl":
        return dice_loss(y, prob, cfg)
    if kind == "rpdl":
        return rpdl(y, prob, m, cfg)
    raise ConfigError(f"unknown loss kind {kind!r}")


def split_pairs(dataset, fraction: float, rng):
    """Random (image index, annotation index) train/validation split."""
    pairs = [(i, j) for i, (_, ann) in enumerate(dataset) for j in range(len(ann))]
    if len(pairs) < 2:
        # nothing to hold out: validate on the training pair itself
        return pairs, list(pairs)
    n_val = min(len(pairs) - 1, max(1, int(round(fraction * len(pairs)))))
    order = rng.permutation(len(pairs))
    val = sorted(pairs[k] for k in order[:n_val])
    train_ = sorted(pairs[k] for k in order[n_val:])
    return train_, val


def train(net: TinySegNet, dataset, loss_kind: str, schedule: TrainSchedule = TrainSchedule(),
          *, loss_cfg: LossConfig | None = None, rpmaps: dict | None = None) -> TrainedModel:
    """Train ``net`` (left untouched) and return the best-validation model.

    ``dataset`` is a sequence of ``(intensity, AnnotationSet)``.  ``rpmaps``
    overrides the per-image reward-penalty maps (keyed by image id); by
    default they are built once from the dataset's annotations.
    """
    if loss_kind not in LOSS_KINDS:
        raise ConfigError(f"unknown loss kind {loss_kind!r}")
    dataset = [(grid.as_grid(x), ann) for x, ann in dataset]
    if not dataset:
        raise ConfigError("training set is empty")
    for x, ann in dataset:
        grid.check_same_shape(x, ann.masks[0])
    if loss_cfg is None:
        # the foreground weight only matters for WCEL
        if loss_kind == "wcel":
            loss_cfg = LossConfig(wcel_weight=default_wcel_weight(m for _, ann in dataset for m in ann.masks))
        else:
            loss_cfg = LossConfig()
    maps = {}
    if loss_kind == "rpdl":
        maps = dict(rpmaps) if rpmaps is not None else {ann.image_id: build_rpmap(ann) for _, ann in dataset}

    split_ss, sample_ss, aug_ss, drop_ss = np.random.SeedSequence(schedule.rng_seed).spawn(4)
    train_pairs, val_pairs = split_pairs(dataset, schedule.validation_fraction,
                                         np.random.default_rng(split_ss))
    sample_rng = np.random.default_rng(sample_ss)
    aug_rng = np.random.default_rng(aug_ss)
    drop_rng = np.random.default_rng(drop_ss)
    ops = _augmentations(schedule.augmentation, dataset[0][0].shape)
    by_image: dict[int, list[int]] = {}
    for i, j in train_pairs:
        by_image.setdefault(i, []).append(j)
    images = sorted(by_image)

    def pair_loss(cur, i, j, op, dropout=None):
        x, ann = dataset[i]
        y = ann.masks[j]
        m = maps.get(ann.image_id)
        if not op.is_identity:
            x, y = op.apply(x), op.apply(y)
            m = None if m is None else m.augmented(op)
        prob, cache = _forward(cur, x, dropout)
        return loss_value_and_grad(loss_kind, y, prob, m, loss_cfg), cache

    identity = grid.AugmentOp.identity()

    def validation_loss(cur):
        return float(np.mean([pair_loss(cur, i, j, identity)[0].value for i, j in val_pairs]))

    cur = net.copy()
    best = TrainedModel(net.copy(), -1, [], loss_kind, schedule, loss_cfg.wcel_weight)
    plateau = PlateauDecay(schedule.initial_lr, schedule.plateau_factor, schedule.plateau_patience)
    stopper = EarlyStopping(schedule.early_stop_patience)
    state = AdamState.zeros(cur.params)
    dropout = (drop_rng, schedule.dropout_rate) if schedule.dropout_rate > 0 else None

    for epoch in range(schedule.max_epochs):
        lr = plateau.lr
        picks = [(i, by_image[i][sample_rng.integers(len(by_image[i]))])
                 for i in sample_rng.permutation(images)]
        epoch_losses = []
        for start in range(0, len(picks), schedule.batch_size):
            batch = picks[start : start + schedule.batch_size]
            total = {k: np.zeros_like(cur.params[k]) for k in PARAM_ORDER}
            for i, j in batch:
                op = ops[aug_rng.integers(len(ops))]
                lg, cache = pair_loss(cur, i, j, op, dropout)
                if not np.isfinite(lg.value):
                    raise TrainingDivergedError(epoch)
                epoch_losses.append(lg.value)
                for k, g in _backward(cur, cache, lg.gradient).items():
                    total[k] += g
            grads = {k: g / len(batch) for k, g in total.items()}
            cur.params, state = adam_step(cur.params, grads, state, lr)
        val = validation_loss(cur)
        train_loss = float(np.mean(epoch_losses))
        if not (np.isfinite(val) and np.isfinite(train_loss)):
            raise TrainingDivergedError(epoch)
        best.history.append(EpochRecord(epoch, train_loss, val, lr))
        log.debug("epoch %d train %.5f val %.5f lr %.2e", epoch, train_loss, val, lr)
        stop = stopper.step(val, epoch)
        if stopper.best_epoch == epoch:
            best.net = cur.copy()
            best.best_epoch = epoch
        if stop:
            break
        plateau.step(val)
    return best


def write_history_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for r in history:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.lr)])


# ---------------------------------------------------------------------------
# checkpoints: a NUSEG1 f32 volume of shape (1, 1, P) plus a JSON manifest


def save_checkpoint(path, model: TrainedModel | TinySegNet, **extra) -> Path:
    net = model.net if isinstance(model, TrainedModel) else model
    manifest = {
        "image_id": extra.pop("image_id", ""),
        "annotator_id": "",
        "kind": "checkpoint",
        "layers": [
            {"name": k, "shape": list(net.params[k].shape)} for k in PARAM_ORDER
        ],
        "architecture": "conv3-leaky-conv3-leaky-conv1-sigmoid",
        "leaky_slope": net.leaky_slope,
        "input_shape": None if net.input_shape is None else list(net.input_shape),
    }
    if isinstance(model, TrainedModel):
        manifest["loss_kind"] = model.loss_kind
        manifest["best_epoch"] = model.best_epoch
        manifest["wcel_weight"] = model.wcel_weight
        if model.schedule is not None:
            manifest["schedule"] = asdict(model.schedule)
    manifest.update(extra)
    flat = net.flat_parameters().reshape(1, 1, -1)
    return volio.write_volume(path, flat, mask=False, meta=manifest)


def load_checkpoint(path) -> tuple[TinySegNet, dict]:
    path = Path(path)
    flat = volio.read_volume(path).ravel()
    side = volio.sidecar_path(path)
    if not side.exists():
        raise FormatError(side, "missing checkpoint manifest")
    manifest = json.loads(side.read_text())
    if manifest.get("kind") != "checkpoint":
        raise FormatError(path, "not a checkpoint")
    shapes = [(layer["name"], tuple(layer["shape"])) for layer in manifest["layers"]]
    total = sum(int(np.prod(shape)) for _, shape in shapes)
    if total != flat.size:
        raise FormatError(path, f"manifest describes {total} parameters, blob holds {flat.size}")
    params, i = {}, 0
    for name, shape in shapes:
        size = int(np.prod(shape))
        params[name] = flat[i : i + size].reshape(shape).copy()
        i += size
    shape = manifest.get("input_shape")
    net = TinySegNet(params, float(manifest["leaky_slope"]), None if shape is None else tuple(shape))
    return net, manifest
