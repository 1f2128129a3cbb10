"""Reward-penalty maps built from every annotation of one image.

The construction has three steps: count how many annotators marked each
voxel, replace the zero counts by the negated maximum count, and divide
the whole map by that maximum.  Voxels no annotator touched end up at the
penalty value (-1 by default); annotated voxels get ``count / max_count``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import grid
from .errors import DegenerateAnnotationError, DimensionError, DomainError


@dataclass(frozen=True, eq=False)
class AnnotationSet:
    image_id: str
    masks: tuple
    annotator_ids: tuple

    def __post_init__(self):
        masks = tuple(grid.as_mask(m) for m in self.masks)
        ids = tuple(str(a) for a in self.annotator_ids)
        if not masks:
            raise DimensionError("an annotation set needs at least one mask")
        if len(ids) != len(masks):
            raise ValueError(f"{len(masks)} masks but {len(ids)} annotator ids")
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate annotator ids in {ids}")
        grid.check_same_shape(*masks)
        object.__setattr__(self, "masks", masks)
        object.__setattr__(self, "annotator_ids", ids)
        object.__setattr__(self, "image_id", str(self.image_id))

    @property
    def shape(self) -> grid.GridShape:
        return grid.GridShape.of(self.masks[0].shape)

    def __len__(self):
        return len(self.masks)

    def mask(self, annotator_id) -> np.ndarray:
        return self.masks[self.annotator_ids.index(str(annotator_id))]

    def without(self, annotator_id) -> "AnnotationSet":
        keep = [i for i, a in enumerate(self.annotator_ids) if a != str(annotator_id)]
        if len(keep) == len(self):
            raise KeyError(annotator_id)
        return AnnotationSet(
            self.image_id, [self.masks[i] for i in keep], [self.annotator_ids[i] for i in keep]
        )

    def augmented(self, op: grid.AugmentOp) -> "AnnotationSet":
        return AnnotationSet(self.image_id, [op.apply(m) for m in self.masks], self.annotator_ids)


@dataclass(frozen=True, eq=False)
class RewardPenaltyMap:
    values: np.ndarray
    penalty_value: float = -1.0
    image_id: str | None = None

    @property
    def shape(self) -> grid.GridShape:
        return grid.GridShape.of(self.values.shape)

    def augmented(self, op: grid.AugmentOp) -> "RewardPenaltyMap":
        return RewardPenaltyMap(op.apply(self.values), self.penalty_value, self.image_id)

    @classmethod
    def unit(cls, shape) -> "RewardPenaltyMap":
        """All-ones map; turns the reward-penalty losses and metrics into plain Dice."""
        return cls(np.ones(grid.GridShape.of(shape)))


def count_map(annotations: AnnotationSet) -> np.ndarray:
    counts = np.zeros(annotations.shape, dtype=np.float64)
    for m in annotations.masks:
        counts += m
    return counts


def apply_penalty(counts) -> np.ndarray:
    counts = grid.as_grid(counts)
    if np.any(counts < 0) or np.any(counts != np.round(counts)):
        raise DomainError("counts must be nonnegative integers")
    top = counts.max()
    if top == 0:
        raise DegenerateAnnotationError("no voxel is annotated by any annotator")
    return np.where(counts == 0, -top, counts)


def normalize(penalized, penalty_value: float = -1.0) -> RewardPenaltyMap:
    penalized = grid.as_grid(penalized)
    top = penalized.max()
    if top <= 0:
        raise DegenerateAnnotationError("penalized map has no rewarded voxel")
    values = penalized / top
    values[penalized < 0] = penalty_value
    return RewardPenaltyMap(values, float(penalty_value))


def build_rpmap(annotations: AnnotationSet, penalty_value: float = -1.0) -> RewardPenaltyMap:
    rp = normalize(apply_penalty(count_map(annotations)), penalty_value)
    return RewardPenaltyMap(rp.values, rp.penalty_value, annotations.image_id)
