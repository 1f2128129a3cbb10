"""Dense voxel grids, binary masks and the mirror/rotation augmentation group.

Grids are plain ``numpy`` arrays of shape ``(D, H, W)``: ``float64`` for
real-valued fields (probability maps, logits, gradients) and ``uint8`` for
binary masks.  2D data is represented as a volume with ``D == 1``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DimensionError, DomainError


class GridShape(NamedTuple):
    d: int
    h: int
    w: int

    @property
    def n(self) -> int:
        return self.d * self.h * self.w

    @classmethod
    def of(cls, shape) -> "GridShape":
        if isinstance(shape, (int, np.integer)):
            shape = (shape, shape, shape)
        shape = tuple(int(s) for s in shape)
        if len(shape) != 3 or min(shape) < 1:
            raise DimensionError(f"grid shape must be three positive extents, got {shape}")
        return cls(*shape)


def as_grid(a) -> np.ndarray:
    """Validate and return ``a`` as a finite float64 volume."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 3:
        raise DimensionError(f"expected a 3D volume, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DomainError("grid contains non-finite values")
    return a


def as_mask(a) -> np.ndarray:
    """Validate and return ``a`` as a uint8 {0, 1} volume."""
    arr = np.asarray(a)
    if arr.ndim != 3:
        raise DimensionError(f"expected a 3D mask, got shape {arr.shape}")
    if arr.dtype == np.bool_:
        return arr.astype(np.uint8)
    if not np.all((arr == 0) | (arr == 1)):
        raise DomainError("mask values must be exactly 0 or 1")
    return arr.astype(np.uint8)


def check_same_shape(*arrays) -> GridShape:
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) != 1:
        raise DimensionError(f"shape mismatch: {sorted(shapes)}")
    return GridShape.of(shapes.pop())


def hadamard(a, b) -> np.ndarray:
    check_same_shape(a, b)
    return np.multiply(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))


def reduce_sum(a) -> float:
    # C-order ravel + numpy's pairwise summation: fixed traversal, bit-reproducible.
    return float(np.sum(np.ravel(np.asarray(a, dtype=np.float64), order="C")))


def binarize(p, threshold: float = 0.5) -> np.ndarray:
    """Foreground where ``p > threshold`` (strict)."""
    p = as_grid(p)
    if p.size and (p.min() < 0.0 or p.max() > 1.0):
        raise DomainError("binarize expects probabilities in [0, 1]")
    return (p > threshold).astype(np.uint8)


# ---------------------------------------------------------------------------
# augmentation group


_PROBE = np.arange(2 * 3 * 5).reshape(2, 3, 5)


@dataclass(frozen=True)
class AugmentOp:
    """Signed axis permutation: transpose by ``perm`` then flip the marked output axes.

    The 48 such operations form the full symmetry group of the cube, which is
    exactly the group generated by the three axis mirrors and the 90 degree
    rotations about each axis.
    """

    perm: tuple[int, int, int] = (0, 1, 2)
    flips: tuple[bool, bool, bool] = (False, False, False)

    def __post_init__(self):
        if sorted(self.perm) != [0, 1, 2]:
            raise ValueError(f"perm must be a permutation of (0, 1, 2), got {self.perm}")

    def apply(self, g: np.ndarray) -> np.ndarray:
        out = np.transpose(g, self.perm)
        axes = tuple(i for i, f in enumerate(self.flips) if f)
        if axes:
            out = np.flip(out, axis=axes)
        return np.ascontiguousarray(out)

    @property
    def is_identity(self) -> bool:
        return self.perm == (0, 1, 2) and not any(self.flips)

    @property
    def preserves_shape(self) -> bool:
        return self.perm == (0, 1, 2)

    def then(self, other: "AugmentOp") -> "AugmentOp":
        """The operation applying ``self`` first and ``other`` second."""
        return _identify(other.apply(self.apply(_PROBE)))

    def inverse(self) -> "AugmentOp":
        for op in augmentation_group():
            if self.then(op).is_identity:
                return op
        raise AssertionError("unreachable: group element without inverse")

    @classmethod
    def identity(cls) -> "AugmentOp":
        return cls()

    @classmethod
    def mirror(cls, axis: int) -> "AugmentOp":
        flips = [False, False, False]
        flips[axis] = True
        return cls((0, 1, 2), tuple(flips))

    @classmethod
    def rot90(cls, axis: int, k: int = 1) -> "AugmentOp":
        """Quarter turn(s) about ``axis`` (0=z/depth, 1=y, 2=x)."""
        plane = tuple(i for i in range(3) if i != axis)
        return _identify(np.rot90(_PROBE, k=k, axes=plane))

    def __str__(self):
        flips = "".join("f" if f else "." for f in self.flips)
        return f"p{''.join(map(str, self.perm))}{flips}"

    @classmethod
    def parse(cls, text: str) -> "AugmentOp":
        if len(text) != 7 or text[0] != "p":
            raise ValueError(f"bad augmentation code {text!r}")
        return cls(tuple(int(c) for c in text[1:4]), tuple(c == "f" for c in text[4:]))


def _identify(result: np.ndarray) -> AugmentOp:
    perm = tuple(_PROBE.shape.index(s) for s in result.shape)
    base = np.transpose(_PROBE, perm)
    for flips in itertools.product((False, True), repeat=3):
        axes = tuple(i for i, f in enumerate(flips) if f)
        cand = np.flip(base, axis=axes) if axes else base
        if np.array_equal(cand, result):
            return AugmentOp(perm, flips)
    raise ValueError("array is not a signed axis permutation of the probe")


def augmentation_group() -> list[AugmentOp]:
    """All 48 elements in a fixed order, identity first."""
    return [
        AugmentOp(perm, flips)
        for perm in itertools.permutations(range(3))
        for flips in itertools.product((False, True), repeat=3)
    ]


def mirror_group() -> list[AugmentOp]:
    """The 8 shape-preserving elements (axis mirrors only)."""
    return [op for op in augmentation_group() if op.preserves_shape]


def augment(g, transform: AugmentOp) -> np.ndarray:
    return transform.apply(np.asarray(g))
