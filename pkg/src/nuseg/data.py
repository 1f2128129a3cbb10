"""Synthetic non-unique segmentation corpora and their on-disk layout.

Each synthetic image holds an ellipsoidal *core* that every annotator
marks, a band of possible *fringe* around it that each annotator grows
into by seeded random dilation biased toward their own preferred
direction, and a *forbidden* blob next to the structure that nobody
touches.  The intensity volume shows the core brightly, the fringe band
with a fading ramp and the forbidden blob at fringe-like brightness, on
top of a smoothed noise field.

Directory layout::

    <root>/corpus.json
    <root>/<image_id>/intensity.nuseg (+ .json)
    <root>/<image_id>/ann_<annotator_id>.nuseg (+ .json)
    <root>/<image_id>/core.nuseg, forbidden.nuseg (+ .json)
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import grid, volio
from .errors import ConfigError, FormatError
from .rpmap import AnnotationSet, build_rpmap

_CROSS = ndimage.generate_binary_structure(3, 1)


@dataclass(frozen=True)
class SynthConfig:
    shape: tuple = (32, 32, 32)
    num_images: int = 9
    num_annotators: int = 7
    core_radius_range: tuple = (3.5, 5.5)
    fringe_width_range: tuple = (2, 4)
    forbidden_margin: int = 2
    forbidden_radius_range: tuple = (3.0, 5.0)
    growth_prob: float = 0.55
    direction_bias: float = 0.45
    noise: float = 0.12
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(grid.GridShape.of(self.shape)))
        for name in ("core_radius_range", "fringe_width_range", "forbidden_radius_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ConfigError(f"{name} must satisfy 0 < lo <= hi, got {(lo, hi)}")
            object.__setattr__(self, name, (lo, hi))
        if self.num_images < 1 or self.num_annotators < 1:
            raise ConfigError("need at least one image and one annotator")
        if self.forbidden_margin < 1:
            raise ConfigError("forbidden_margin must be at least one voxel")
        if not 0 < self.growth_prob <= 1:
            raise ConfigError("growth_prob must lie in (0, 1]")
        if self.noise < 0:
            raise ConfigError("noise must be nonnegative")
        reach = self.core_radius_range[1] + self.fringe_width_range[1] + 1
        if 2 * reach > min(self.shape):
            raise ConfigError(
                f"core radius {self.core_radius_range[1]} plus fringe {self.fringe_width_range[1]} "
                f"does not fit in {self.shape}"
            )


@dataclass(frozen=True, eq=False)
class CorpusImage:
    image_id: str
    intensity: np.ndarray
    annotations: AnnotationSet
    core: np.ndarray | None = None
    forbidden: np.ndarray | None = None

    def rpmap(self):
        return build_rpmap(self.annotations)

    def augmented(self, op: grid.AugmentOp, image_id: str | None = None) -> "CorpusImage":
        new_id = image_id or f"{self.image_id}@{op}"
        ann = self.annotations.augmented(op)
        return CorpusImage(
            new_id,
            op.apply(self.intensity),
            AnnotationSet(new_id, ann.masks, ann.annotator_ids),
            None if self.core is None else op.apply(self.core),
            None if self.forbidden is None else op.apply(self.forbidden),
        )


@dataclass(frozen=True, eq=False)
class Corpus:
    images: tuple
    config: SynthConfig | None = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        ids = [im.image_id for im in self.images]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate image ids in corpus")

    def __len__(self):
        return len(self.images)

    def __iter__(self):
        return iter(self.images)

    @property
    def image_ids(self) -> list[str]:
        return [im.image_id for im in self.images]

    @property
    def annotator_ids(self) -> tuple:
        return self.images[0].annotations.annotator_ids if self.images else ()

    def get(self, image_id) -> CorpusImage:
        for im in self.images:
            if im.image_id == str(image_id):
                return im
        raise KeyError(image_id)


# ---------------------------------------------------------------------------
# generation


def _ellipsoid(shape, center, radii):
    zz, yy, xx = np.indices(shape, dtype=np.float64)
    r = ((zz - center[0]) / radii[0]) ** 2 + ((yy - center[1]) / radii[1]) ** 2 + ((xx - center[2]) / radii[2]) ** 2
    return r <= 1.0


def _unit(v):
    return v / np.linalg.norm(v)


def _annotator_mask(core, envelope, center, width, direction, cfg, rng):
    """Grow the core by ``width`` rounds of biased random dilation."""
    shape = core.shape
    coords = np.indices(shape, dtype=np.float64) - np.asarray(center, dtype=np.float64)[:, None, None, None]
    norm = np.sqrt((coords**2).sum(axis=0))
    norm[norm == 0] = 1.0
    cos = np.tensordot(direction, coords, axes=1) / norm
    prob = np.clip(cfg.growth_prob + cfg.direction_bias * cos, 0.0, 1.0)
    mask = core.copy()
    for _ in range(width):
        cand = ndimage.binary_dilation(mask, _CROSS) & ~mask & envelope
        mask |= cand & (rng.random(shape) < prob)
    return mask


def _intensity(core, envelope, forbidden, cfg, rng):
    fringe_max = cfg.fringe_width_range[1]
    dist = ndimage.distance_transform_cdt(~core, metric="taxicab").astype(np.float64)
    ramp = np.where(envelope & ~core, 0.75 - 0.45 * (dist - 1) / max(fringe_max - 1, 1), 0.0)
    structure = core * 1.0 + ramp + forbidden * 0.6
    structure = ndimage.gaussian_filter(structure, 0.7)
    field_ = ndimage.gaussian_filter(rng.standard_normal(core.shape), 1.0)
    field_ *= cfg.noise / max(field_.std(), 1e-12)
    # f32-representable so files round-trip exactly
    return (structure + field_).astype(np.float32).astype(np.float64)


def generate_image(cfg: SynthConfig, index: int) -> CorpusImage:
    shape = cfg.shape
    rng = np.random.default_rng([cfg.rng_seed, index])
    r_lo, r_hi = cfg.core_radius_range
    f_lo, f_hi = cfg.fringe_width_range
    reach = r_hi + f_hi + 1
    mid = np.array(shape, dtype=np.float64) / 2.0 - 0.5
    slack = np.maximum(np.array(shape) / 2.0 - reach - 1, 0)
    center = mid + rng.uniform(-1, 1, 3) * np.minimum(slack, 3.0)
    radii = rng.uniform(r_lo, r_hi, 3)
    core = _ellipsoid(shape, center, radii)
    if not core.any():
        raise ConfigError("core radius too small: empty core")
    envelope = ndimage.binary_dilation(core, _CROSS, iterations=int(f_hi))

    # forbidden blob: beside the envelope, never within forbidden_margin of it
    u = _unit(rng.standard_normal(3))
    rf = rng.uniform(*cfg.forbidden_radius_range)
    f_center = center + u * (radii.max() + f_hi + cfg.forbidden_margin + rf)
    blob = _ellipsoid(shape, f_center, (rf, rf, rf))
    clearance = ndimage.distance_transform_edt(~envelope)
    forbidden = blob & (clearance > cfg.forbidden_margin)

    masks, ids = [], []
    for e in range(cfg.num_annotators):
        arng = np.random.default_rng([cfg.rng_seed, index, e])
        width = int(arng.integers(int(f_lo), int(f_hi) + 1))
        direction = _unit(arng.standard_normal(3))
        masks.append(_annotator_mask(core, envelope, center, width, direction, cfg, arng))
        ids.append(f"a{e + 1}")
    image_id = f"img{index + 1}"
    intensity = _intensity(core, envelope, forbidden, cfg, rng)
    return CorpusImage(
        image_id,
        intensity,
        AnnotationSet(image_id, masks, ids),
        core.astype(np.uint8),
        forbidden.astype(np.uint8),
    )


def generate_corpus(cfg: SynthConfig = SynthConfig()) -> Corpus:
    return Corpus([generate_image(cfg, i) for i in range(cfg.num_images)], cfg)


def expand_with_augmentation(corpus: Corpus, ops=None) -> Corpus:
    """Replicate every image under each operation in ``ops`` (default: the full group)."""
    ops = grid.augmentation_group() if ops is None else list(ops)
    if any(not op.preserves_shape for op in ops):
        for im in corpus:
            if len(set(im.intensity.shape)) != 1:
                raise ConfigError(f"rotations need cubic volumes; {im.image_id} is {im.intensity.shape}")
    images = []
    for im in corpus:
        for op in ops:
            images.append(im if op.is_identity else im.augmented(op))
    return Corpus(images, corpus.config)


# ---------------------------------------------------------------------------
# persistence


def save_corpus(corpus: Corpus, root) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for im in corpus:
        d = root / im.image_id
        volio.write_volume(d / "intensity.nuseg", im.intensity, mask=False,
                           meta={"image_id": im.image_id, "annotator_id": "", "kind": "intensity"})
        for aid, m in zip(im.annotations.annotator_ids, im.annotations.masks):
            volio.write_volume(d / f"ann_{aid}.nuseg", m, mask=True,
                               meta={"image_id": im.image_id, "annotator_id": aid, "kind": "annotation"})
        for kind in ("core", "forbidden"):
            arr = getattr(im, kind)
            if arr is not None:
                volio.write_volume(d / f"{kind}.nuseg", arr, mask=True,
                                   meta={"image_id": im.image_id, "annotator_id": "", "kind": kind})
        entries.append({"image_id": im.image_id, "annotator_ids": list(im.annotations.annotator_ids)})
    manifest = {
        "format": "nuseg-corpus/1",
        "images": entries,
        "config": None if corpus.config is None else asdict(corpus.config),
    }
    (root / "corpus.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def _read_checked(path, image_id, annotator_id, kind):
    arr = volio.read_volume(path)
    meta = volio.read_sidecar(path)
    if (meta["image_id"], meta["annotator_id"], meta["kind"]) != (image_id, annotator_id, kind):
        raise FormatError(path, f"sidecar says {meta}, expected {image_id}/{annotator_id}/{kind}")
    return arr


def load_corpus(root) -> Corpus:
    root = Path(root)
    man_path = root / "corpus.json"
    if not man_path.exists():
        raise FormatError(man_path, "missing corpus manifest")
    try:
        manifest = json.loads(man_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(man_path, f"invalid JSON ({exc.msg})") from exc
    images = []
    for entry in manifest["images"]:
        iid = entry["image_id"]
        d = root / iid
        intensity = _read_checked(d / "intensity.nuseg", iid, "", "intensity")
        masks = []
        for aid in entry["annotator_ids"]:
            path = d / f"ann_{aid}.nuseg"
            m = _read_checked(path, iid, aid, "annotation")
            if m.shape != intensity.shape:
                raise FormatError(path, f"shape {m.shape} differs from intensity {intensity.shape}")
            masks.append(m)
        extra = {}
        for kind in ("core", "forbidden"):
            path = d / f"{kind}.nuseg"
            extra[kind] = _read_checked(path, iid, "", kind) if path.exists() else None
        images.append(CorpusImage(iid, intensity, AnnotationSet(iid, masks, entry["annotator_ids"]), **extra))
    cfg = manifest.get("config")
    return Corpus(images, None if cfg is None else SynthConfig(**cfg))
