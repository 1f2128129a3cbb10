"""Learning from non-unique segmentations: reward-penalty Dice loss, its baselines and a desk-scale harness."""

from .errors import (
    ConfigError,
    DegenerateAnnotationError,
    DimensionError,
    DomainError,
    FormatError,
    NumericalError,
    NusegError,
    TrainingDivergedError,
    UndefinedMetricError,
    UnsupportedDtypeError,
)
from .grid import AugmentOp, GridShape, augment, augmentation_group, binarize, hadamard, reduce_sum
from .loss import LossConfig, LossGradPair, dice_loss, finite_diff_gradient, rpdl, wcel
from .metrics import MetricReport, dice_coefficient, evaluate_against_set, inter_annotator_baseline, rpd_coefficient
from .model import TinySegNet, TrainSchedule, backward, forward
from .rpmap import AnnotationSet, RewardPenaltyMap, build_rpmap

__version__ = "0.1.0"
