"""Patch extraction for the object-containing and uniform sampling strategies."""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage as ndi
from torch.utils.data import Dataset

from .augmentation import (
    DIHEDRAL,
    FoveationConfig,
    apply_dihedral,
    elastic_deform,
    foveate,
    random_displacement_field,
)
from .networks import UNET_D, NetworkSpec, receptive_margin
from .pyramid import Slide, read_array

log = logging.getLogger(__name__)

OBJECT = "object_containing"
UNIFORM = "uniform_foreground"
STRATEGIES = (OBJECT, UNIFORM)


@dataclass
class PatchSample:
    """An image patch with its aligned label over the same footprint.

    For FCN samples ``target`` is the label cropped to the output footprint
    (``margin`` pixels per side). For sliding-window samples (``margin`` is
    None) the target is the class of the centre pixel.
    """

    image: np.ndarray
    label: np.ndarray
    wsi_id: str
    level: int
    origin: tuple[int, int]
    strategy: str
    margin: int | None = 0

    @property
    def target(self):
        if self.margin is None:
            c = self.label.shape[0] // 2
            return self.label[c, c]
        m = self.margin
        return self.label[m : self.label.shape[0] - m, m : self.label.shape[1] - m]

    @property
    def positive_fraction(self) -> float:
        return float(np.mean(self.target))


def wsi_rng(seed: int, wsi_id: str) -> np.random.Generator:
    """Independent stream per (master seed, slide id)."""
    return np.random.default_rng([seed, zlib.crc32(wsi_id.encode())])


def _extract(slide: Slide, level, centers, size, strategy, margin):
    raster = slide.image.levels[level]
    labels = slide.annotation_at(level)
    half = size // 2
    out = []
    for cy, cx in centers:
        x, y = int(cx) - half, int(cy) - half
        out.append(
            PatchSample(
                read_array(raster, x, y, size, size),
                read_array(labels, x, y, size, size),
                slide.wsi_id,
                level,
                (x, y),
                strategy,
                margin,
            )
        )
    return out


def object_centers(slide: Slide, n: int, patch_size: int, rng, level: int = 0) -> np.ndarray:
    """Centres (y, x) whose ``patch_size`` footprint shows at least one object pixel."""
    mask = slide.annotation_at(level)
    if not mask.any():
        raise ValueError(f"{slide.wsi_id}: no annotated objects, object-containing sampling is undefined")
    if n == 0:
        return np.zeros((0, 2), int)
    # footprint of centre c spans [c - size//2, c - size//2 + size); scipy's window matches
    qualifies = ndi.maximum_filter(mask, size=patch_size, mode="constant", cval=0)
    idx = np.flatnonzero(qualifies)
    pick = idx[rng.integers(0, idx.size, size=n)]
    return np.stack(np.unravel_index(pick, mask.shape), axis=1)


def uniform_centers(slide: Slide, n: int, rng, level: int = 0) -> np.ndarray:
    """Centres drawn uniformly over the tissue foreground at ``level``."""
    fg = slide.foreground
    if not fg.any():
        raise ValueError(f"{slide.wsi_id}: empty foreground, cannot sample uniformly")
    if n == 0:
        return np.zeros((0, 2), int)
    low = slide.image.low_res_level
    ratio = slide.image.factors[low] // slide.image.factors[level]
    idx = np.flatnonzero(fg)
    pick = idx[rng.integers(0, idx.size, size=n)]
    ys, xs = np.unravel_index(pick, fg.shape)
    h, w = slide.image.shape(level)
    ys = np.minimum(ys * ratio + rng.integers(0, ratio, size=n), h - 1)
    xs = np.minimum(xs * ratio + rng.integers(0, ratio, size=n), w - 1)
    return np.stack([ys, xs], axis=1)


def sample_object_patches(slide: Slide, n: int, patch_size: int, seed: int, level: int = 0, margin=0):
    rng = wsi_rng(seed, slide.wsi_id)
    centers = object_centers(slide, n, patch_size, rng, level)
    return _extract(slide, level, centers, patch_size, OBJECT, margin)


def sample_uniform_patches(slide: Slide, n: int, patch_size: int, seed: int, level: int = 0, margin=0):
    rng = wsi_rng(seed, slide.wsi_id)
    centers = uniform_centers(slide, n, rng, level)
    return _extract(slide, level, centers, patch_size, UNIFORM, margin)


# -- datasets -------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    elastic_fcn: bool = True
    elastic_sw: bool = True
    elastic_grid: int = 8
    max_displacement: float = 12.0
    foveation: FoveationConfig = field(default_factory=FoveationConfig)


@dataclass(frozen=True)
class Recipe:
    raw: int
    dihedral: int
    elastic_seed: int | None = None


def augmentation_ratio(raw: int, augmented: int) -> int:
    """Integral raw-to-augmented ratio; non-divisible totals are rounded down with a warning."""
    if raw <= 0:
        raise ValueError("raw patch count must be positive")
    ratio, rest = divmod(augmented, raw)
    if rest:
        log.warning("%d augmented samples is not a multiple of %d raw patches; using ratio %d (%d samples)",
                    augmented, raw, ratio, ratio * raw)
    return max(ratio, 1)


def make_recipes(n_raw: int, ratio: int, rng, augment: bool = True) -> list[Recipe]:
    """Per raw patch: up to 8 distinct dihedral variants, then elastic variants for the rest."""
    recipes = []
    for i in range(n_raw):
        if not augment:
            recipes.append(Recipe(i, 0))
            continue
        order = rng.permutation(len(DIHEDRAL))
        for j in range(ratio):
            if j < len(DIHEDRAL):
                recipes.append(Recipe(i, int(order[j])))
            else:
                recipes.append(Recipe(i, int(rng.integers(len(DIHEDRAL))), int(rng.integers(2**31))))
    perm = rng.permutation(len(recipes))
    return [recipes[k] for k in perm]


def network_level(spec: NetworkSpec, slide: Slide) -> int:
    """U-Net-D works on the high resolution; U-Net-S and SW-CNN on the low resolution."""
    return 0 if spec.name == UNET_D else slide.image.low_res_level


class PatchDataset(Dataset):
    """Raw patches expanded lazily by augmentation recipes.

    Items are ``(image uint8 HxWx3, target uint8)`` numpy pairs; the target
    is an ``out x out`` map for FCNs and a scalar class for the SW-CNN.
    """

    def __init__(self, samples, recipes, spec: NetworkSpec, augment_cfg=AugmentConfig()):
        self.samples = list(samples)
        self.recipes = list(recipes)
        self.spec = spec
        self.cfg = augment_cfg
        self._foveated = {}

    def __len__(self):
        return len(self.recipes)

    def raw_images(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples]) if self.samples else np.zeros((0, 1, 1, 3))

    def provenance(self, i: int) -> dict:
        r = self.recipes[i]
        s = self.samples[r.raw]
        return {"wsi_id": s.wsi_id, "level": s.level, "origin": list(s.origin), "strategy": s.strategy,
                "dihedral": r.dihedral, "elastic_seed": r.elastic_seed}

    def __getitem__(self, i):
        r = self.recipes[i]
        s = self.samples[r.raw]
        k, flip = DIHEDRAL[r.dihedral]
        if s.margin is None and r.elastic_seed is None:
            # foveation commutes with the dihedral group, so the raw patch is foveated once
            if r.raw not in self._foveated:
                self._foveated[r.raw] = foveate(s.image, self.cfg.foveation)
            c = s.label.shape[0] // 2
            return apply_dihedral(self._foveated[r.raw], k, flip), np.uint8(s.label[c, c])
        image, label = s.image, s.label
        if r.elastic_seed is not None:
            field_ = random_displacement_field(
                label.shape, np.random.default_rng(r.elastic_seed), self.cfg.elastic_grid, self.cfg.max_displacement
            )
            image, label = elastic_deform(image, label, field_)
        image, label = apply_dihedral(image, k, flip), apply_dihedral(label, k, flip)
        if s.margin is None:
            c = label.shape[0] // 2
            return foveate(image, self.cfg.foveation), np.uint8(label[c, c])
        m = s.margin
        return image, label[m : label.shape[0] - m, m : label.shape[1] - m]


def build_training_set(
    slides,
    strategy: str,
    spec: NetworkSpec,
    n_raw: int,
    ratio: int = 1,
    augment_cfg: AugmentConfig = AugmentConfig(),
    seed: int = 0,
    augment: bool = True,
) -> PatchDataset:
    """Sample ``n_raw`` patches (equal share per slide) and expand them ``ratio``-fold."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    slides = list(slides)
    samples = []
    shares = [n_raw // len(slides) + (1 if i < n_raw % len(slides) else 0) for i in range(len(slides))]
    if spec.is_fcn:
        size, margin = spec.input_size, receptive_margin(spec)
    else:
        size, margin = augment_cfg.foveation.context_size, None
    for slide, n in zip(slides, shares):
        level = network_level(spec, slide)
        if strategy == OBJECT:
            samples += sample_object_patches(slide, n, size, seed, level, margin)
        else:
            samples += sample_uniform_patches(slide, n, size, seed, level, margin)
    use_elastic = augment_cfg.elastic_fcn if spec.is_fcn else augment_cfg.elastic_sw
    if not use_elastic and ratio > len(DIHEDRAL):
        log.warning("elastic deformation disabled; capping augmentation ratio at %d", len(DIHEDRAL))
        ratio = len(DIHEDRAL)
    rng = np.random.default_rng([seed, 0xA06])
    return PatchDataset(samples, make_recipes(len(samples), ratio, rng, augment), spec, augment_cfg)


# -- materialisation --------------------------------------------------------------

INDEX = "index.json"


def save_dataset(ds: PatchDataset, directory) -> Path:
    """Write every augmented item as a PNG pair plus an index with provenance."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(len(ds)):
        image, target = ds[i]
        entry = {"image": f"patch_{i:06d}.png", **ds.provenance(i)}
        Image.fromarray(image).save(directory / entry["image"], compress_level=1)
        if np.ndim(target) == 0:
            entry["target"] = int(target)
        else:
            entry["label"] = f"label_{i:06d}.png"
            Image.fromarray(np.asarray(target, np.uint8), mode="L").save(directory / entry["label"], compress_level=1)
        entries.append(entry)
    (directory / INDEX).write_text(json.dumps({"network": ds.spec.to_dict(), "items": entries}, indent=1))
    return directory


class MaterializedDataset(Dataset):
    """Reads a directory written by :func:`save_dataset`; yields the same items."""

    def __init__(self, directory):
        self.directory = Path(directory)
        index = json.loads((self.directory / INDEX).read_text())
        self.items = index["items"]
        self.spec = NetworkSpec.from_dict(index["network"])

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        e = self.items[i]
        image = np.asarray(Image.open(self.directory / e["image"]))
        if "target" in e:
            return image, np.uint8(e["target"])
        return image, np.asarray(Image.open(self.directory / e["label"]))

    def raw_images(self) -> np.ndarray:
        return np.stack([self[i][0] for i in range(len(self))])
