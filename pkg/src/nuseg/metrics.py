"""Evaluation metrics on binarized predictions.

Metric-side formulas carry no epsilon; undefined cases raise
``UndefinedMetricError`` rather than returning a sentinel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import grid
from .errors import UndefinedMetricError
from .rpmap import AnnotationSet, RewardPenaltyMap


@dataclass(frozen=True)
class ReferenceScore:
    image_id: str
    annotator_id: str
    dice: float
    rpd: float


@dataclass(frozen=True)
class MetricReport:
    dice_mean: float
    dice_std: float
    rpd_mean: float
    rpd_std: float
    per_reference: tuple = field(default=())

    @classmethod
    def from_scores(cls, scores) -> "MetricReport":
        scores = tuple(scores)
        if not scores:
            raise UndefinedMetricError("cannot summarise an empty score list")
        dice = np.array([s.dice for s in scores])
        rpd = np.array([s.rpd for s in scores])
        # population std
        return cls(
            float(dice.mean()), float(dice.std()), float(rpd.mean()), float(rpd.std()), scores
        )

    def merged(self, *others: "MetricReport") -> "MetricReport":
        return MetricReport.from_scores(
            self.per_reference + tuple(s for o in others for s in o.per_reference)
        )

    def csv_rows(self, fold) -> list[tuple]:
        return [(fold, s.image_id, s.annotator_id, s.dice, s.rpd) for s in self.per_reference]

    def summary(self) -> dict:
        return {
            "dice_mean": self.dice_mean,
            "dice_std": self.dice_std,
            "rpd_mean": self.rpd_mean,
            "rpd_std": self.rpd_std,
            "n": len(self.per_reference),
        }


def dice_coefficient(y, p_bin) -> float:
    grid.check_same_shape(y, p_bin)
    y = grid.as_mask(y)
    p_bin = grid.as_mask(p_bin)
    inter = float(np.count_nonzero(y & p_bin))
    total = float(np.count_nonzero(y)) + float(np.count_nonzero(p_bin))
    if total == 0.0:
        raise UndefinedMetricError("Dice is undefined for two empty masks")
    return 2.0 * inter / total


def rpd_coefficient(y, p_bin, m: RewardPenaltyMap) -> float:
    mv = m.values if isinstance(m, RewardPenaltyMap) else np.asarray(m, dtype=np.float64)
    grid.check_same_shape(y, p_bin, mv)
    y = grid.as_mask(y).astype(np.float64)
    p_bin = grid.as_mask(p_bin).astype(np.float64)
    mabs = np.abs(mv)
    num = 2.0 * grid.reduce_sum(y * p_bin * mv)
    den = grid.reduce_sum(y * mabs) + grid.reduce_sum(p_bin * mabs)
    if den == 0.0:
        raise UndefinedMetricError("RPD denominator is zero")
    return num / den


def _score_all(p_bin, refs: AnnotationSet, m) -> MetricReport:
    scores = [
        ReferenceScore(refs.image_id, aid, dice_coefficient(mask, p_bin), rpd_coefficient(mask, p_bin, m))
        for aid, mask in zip(refs.annotator_ids, refs.masks)
    ]
    return MetricReport.from_scores(scores)


def evaluate_against_set(p, refs: AnnotationSet, m: RewardPenaltyMap, threshold: float = 0.5) -> MetricReport:
    """Binarize ``p`` and score it against every reference mask."""
    grid.check_same_shape(p, refs.masks[0])
    return _score_all(grid.binarize(p, threshold), refs, m)


def inter_annotator_baseline(held_out, training_refs: AnnotationSet, m: RewardPenaltyMap) -> MetricReport:
    """Score one annotator's mask, used as if it were a prediction, against the others."""
    grid.check_same_shape(held_out, training_refs.masks[0])
    return _score_all(grid.as_mask(held_out), training_refs, m)
