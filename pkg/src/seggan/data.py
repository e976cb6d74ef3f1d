"""Synthetic shapes data and VOC-style PNG pair ingestion.

The generator paints 1-3 colored shapes (circle, square, triangle) on a
noisy dark background; class identity is fully determined by geometry, and
shape colors are drawn from a bright band disjoint from the background band
so that every class is recoverable from appearance. Images are quantized to
the 8-bit grid at generation time, which makes the PNG round trip exact.

On disk a dataset is ``<root>/images/<id>.png`` + ``<root>/labels/<id>.png``
(8-bit grayscale labels, 255 = ignore) plus a ``manifest.json`` naming ids,
split membership, class count, and the generator seed.
"""

from __future__ import annotations

import dataclasses
import json
import pathlib

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    ConfigurationError,
    FileReadError,
    LabelValueError,
    SizeMismatchError,
)
from .losses import IGNORE_VALUE

# background must stay separable from shape colors; bands are disjoint
_BG_LO, _BG_HI = 0.05, 0.35
_BG_NOISE = 0.06
_SHAPE_LO, _SHAPE_HI = 0.55, 1.0
# half-size range: [10, image_size // 3].  The lower bound keeps every shape
# well above two output-stride cells across; smaller shapes turn into
# boundary-only blobs the segmentation head cannot separate reliably, and
# boundary cells are what cap the achievable IoU at output stride 8.
_MIN_HALF, _MAX_HALF_FRAC = 10, 3
# Positions are re-drawn (bounded retries) when a new shape would hide more
# than this fraction of an earlier shape: a partially-buried shape loses the
# geometry that defines its class, which makes its label unlearnable.
_MAX_OCCLUDED_FRAC = 0.25
_MAX_PLACE_TRIES = 40


@dataclasses.dataclass(frozen=True)
class ShapesConfig:
    num_samples: int = 250
    image_size: int = 64
    num_classes: int = 4  # background, circle, square, triangle
    shapes_min: int = 1
    shapes_max: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.num_samples < 1:
            raise ConfigurationError("num_samples must be positive")
        if self.image_size % 32:
            raise ConfigurationError(
                f"image_size must be divisible by 32, got {self.image_size}"
            )
        if not 2 <= self.num_classes <= 4:
            raise ConfigurationError(
                f"num_classes must be in [2, 4] (background + up to 3 shapes), "
                f"got {self.num_classes}"
            )
        if not 1 <= self.shapes_min <= self.shapes_max:
            raise ConfigurationError(
                f"invalid shapes_per_image range [{self.shapes_min}, {self.shapes_max}]"
            )
        if self.image_size // _MAX_HALF_FRAC < _MIN_HALF:
            raise ConfigurationError(
                f"image_size {self.image_size} too small for the minimum shape size"
            )


@dataclasses.dataclass
class Sample:
    image: np.ndarray  # (1, 3, H, W) float64 in [0, 1]
    labels: np.ndarray  # (1, H, W) int64
    id: str


@dataclasses.dataclass
class Dataset:
    train: list
    val: list
    num_classes: int
    seed: int

    def split(self, name):
        if name not in ("train", "val"):
            raise ConfigurationError(f"unknown split {name!r}")
        return self.train if name == "train" else self.val


def _shape_mask(kind, size, cy, cx, half):
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == 1:  # circle
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= half**2
    if kind == 2:  # square
        return np.maximum(np.abs(yy - cy), np.abs(xx - cx)) <= half
    # apex-up isoceles triangle inscribed in the same box
    in_rows = (yy >= cy - half) & (yy <= cy + half)
    # width grows linearly from apex to base
    spread = (yy - (cy - half)) / 2.0
    return in_rows & (np.abs(xx - cx) <= spread)


def _gen_sample(rng, cfg: ShapesConfig, sample_id):
    s = cfg.image_size
    base = rng.uniform(_BG_LO, _BG_HI, size=3)
    image = base[:, None, None] + rng.uniform(-_BG_NOISE, _BG_NOISE, size=(3, s, s))
    labels = np.zeros((s, s), dtype=np.int64)
    n_shapes = int(rng.integers(cfg.shapes_min, cfg.shapes_max + 1))
    max_half = s // _MAX_HALF_FRAC
    visible = []  # (still-visible mask, original pixel count) per shape
    for _ in range(n_shapes):
        kind = int(rng.integers(1, cfg.num_classes))
        half = int(rng.integers(_MIN_HALF, max_half + 1))
        placed = False
        for _ in range(_MAX_PLACE_TRIES):
            cy = int(rng.integers(half, s - half))
            cx = int(rng.integers(half, s - half))
            mask = _shape_mask(kind, s, cy, cx, half)
            # cumulative bound: what stays visible must cover 1 - frac of
            # the shape as originally drawn, not just of its current remnant
            if all(v.sum() - (mask & v).sum() >= (1.0 - _MAX_OCCLUDED_FRAC) * orig
                   for v, orig in visible):
                placed = True
                break
        if not placed:
            # crowded image: dropping this shape beats burying an earlier
            # one (the first shape always places, so every image keeps >= 1)
            continue
        color = rng.uniform(_SHAPE_LO, _SHAPE_HI, size=3)
        for v, _ in visible:
            v &= ~mask
        visible.append((mask, int(mask.sum())))
        image[:, mask] = color[:, None]
        labels[mask] = kind
    image = np.clip(image, 0.0, 1.0)
    # snap to the 8-bit grid now so the PNG round trip is exact
    image = np.round(image * 255.0) / 255.0
    return Sample(image[None], labels[None], sample_id)


def gen_shapes_dataset(cfg: ShapesConfig) -> Dataset:
    """Deterministic dataset from (cfg, seed); split 80/20 by index."""
    rng = np.random.default_rng(cfg.seed)
    samples = [_gen_sample(rng, cfg, f"shape_{i:05d}") for i in range(cfg.num_samples)]
    n_train = max(1, round(cfg.num_samples * 0.8))
    if cfg.num_samples > 1:
        n_train = min(n_train, cfg.num_samples - 1)
    return Dataset(train=samples[:n_train], val=samples[n_train:],
                   num_classes=cfg.num_classes, seed=cfg.seed)


def write_sample(sample: Sample, root):
    root = pathlib.Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    img8 = np.round(sample.image[0] * 255.0).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(img8, mode="RGB").save(root / "images" / f"{sample.id}.png")
    lab = sample.labels[0].astype(np.uint8)
    Image.fromarray(lab, mode="L").save(root / "labels" / f"{sample.id}.png")


def save_dataset(ds: Dataset, root):
    root = pathlib.Path(root)
    for sample in ds.train + ds.val:
        write_sample(sample, root)
    manifest = {
        "num_classes": ds.num_classes,
        "seed": ds.seed,
        "splits": {
            "train": [s.id for s in ds.train],
            "val": [s.id for s in ds.val],
        },
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_pair(image_path, label_path, num_classes) -> Sample:
    """Read one VOC-style image/label PNG pair."""
    image_path = pathlib.Path(image_path)
    label_path = pathlib.Path(label_path)
    try:
        with Image.open(image_path) as im:
            rgb = np.asarray(im.convert("RGB"))
    except (FileNotFoundError, UnidentifiedImageError, OSError) as e:
        raise FileReadError(f"cannot read image {image_path}: {e}") from e
    try:
        with Image.open(label_path) as im:
            # palette-indexed labels keep their indices; grayscale passes through
            if im.mode == "P":
                lab = np.asarray(im)
            else:
                lab = np.asarray(im.convert("L"))
    except (FileNotFoundError, UnidentifiedImageError, OSError) as e:
        raise FileReadError(f"cannot read label {label_path}: {e}") from e
    if rgb.shape[:2] != lab.shape:
        raise SizeMismatchError(
            f"image {image_path.name} is {rgb.shape[1]}x{rgb.shape[0]} but label "
            f"is {lab.shape[1]}x{lab.shape[0]}"
        )
    bad = (lab != IGNORE_VALUE) & (lab >= num_classes)
    if bad.any():
        raise LabelValueError(
            f"label {label_path.name} contains value {int(lab[bad][0])} outside "
            f"[0, {num_classes}) u {{{IGNORE_VALUE}}}"
        )
    image = rgb.astype(np.float64).transpose(2, 0, 1) / 255.0
    return Sample(image[None], lab.astype(np.int64)[None], image_path.stem)


def load_dataset(root, num_classes=None) -> Dataset:
    """Read a dataset directory written by save_dataset."""
    root = pathlib.Path(root)
    manifest_path = root / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text())
    except FileNotFoundError as e:
        raise FileReadError(f"missing manifest: {manifest_path}") from e
    except json.JSONDecodeError as e:
        raise FileReadError(f"malformed manifest {manifest_path}: {e}") from e
    c = num_classes or int(manifest["num_classes"])
    splits = {}
    for name in ("train", "val"):
        ids = manifest.get("splits", {}).get(name, [])
        splits[name] = [
            load_pair(root / "images" / f"{i}.png", root / "labels" / f"{i}.png", c)
            for i in ids
        ]
    return Dataset(train=splits["train"], val=splits["val"], num_classes=c,
                   seed=int(manifest.get("seed", -1)))
