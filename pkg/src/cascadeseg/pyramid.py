"""Multi-resolution whole-slide image abstraction.

A :class:`PyramidImage` holds one RGB raster per level. Level 0 is the
"high resolution" used for precise segmentation; level 1 is the "low
resolution" obtained by a further factor-4 downscale. Coordinates are
``(x right, y down)`` with the origin at the top-left corner.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage as ndi
from skimage import filters, morphology

LOW_RES_FACTOR = 4
DEFAULT_FACTORS = (1, LOW_RES_FACTOR)
BACKGROUND_RGB = (242, 241, 244)


@dataclass(frozen=True)
class Region:
    """Axis-aligned rectangle at a given pyramid level."""

    level: int
    x: int
    y: int
    w: int
    h: int

    @property
    def x1(self) -> int:
        return self.x + self.w

    @property
    def y1(self) -> int:
        return self.y + self.h

    def intersects(self, other: "Region") -> bool:
        return (
            self.level == other.level
            and self.x < other.x1
            and other.x < self.x1
            and self.y < other.y1
            and other.y < self.y1
        )

    def union(self, other: "Region") -> "Region":
        x0, y0 = min(self.x, other.x), min(self.y, other.y)
        x1, y1 = max(self.x1, other.x1), max(self.y1, other.y1)
        return Region(self.level, x0, y0, x1 - x0, y1 - y0)

    def grow(self, pad: int) -> "Region":
        return Region(self.level, self.x - pad, self.y - pad, self.w + 2 * pad, self.h + 2 * pad)


def area_downsample(raster: np.ndarray, factor: int) -> np.ndarray:
    """Block-average downsampling to ``ceil(shape / factor)``.

    Partial blocks at the right/bottom border average only the pixels they
    actually contain, so constant images stay constant.
    """
    if factor == 1:
        return raster.copy()
    h, w = raster.shape[:2]
    oh, ow = math.ceil(h / factor), math.ceil(w / factor)
    ph, pw = oh * factor - h, ow * factor - w
    pad = ((0, ph), (0, pw)) + ((0, 0),) * (raster.ndim - 2)
    data = np.pad(raster.astype(np.float64), pad)
    valid = np.pad(np.ones((h, w)), ((0, ph), (0, pw)))
    tail = raster.shape[2:]
    sums = data.reshape(oh, factor, ow, factor, *tail).sum(axis=(1, 3))
    counts = valid.reshape(oh, factor, ow, factor).sum(axis=(1, 3))
    counts = counts.reshape(counts.shape + (1,) * len(tail))
    mean = sums / counts
    if np.issubdtype(raster.dtype, np.integer):
        return np.rint(mean).astype(raster.dtype)
    return mean.astype(raster.dtype)


def mask_to_level(mask: np.ndarray, factor: int) -> np.ndarray:
    """Binary mask at a coarser level: a pixel is set when at least half its block is set."""
    if factor == 1:
        return (mask > 0).astype(np.uint8)
    frac = area_downsample((mask > 0).astype(np.float32), factor)
    return (frac >= 0.5).astype(np.uint8)


def upsample_mask(mask: np.ndarray, factor: int, shape: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour upsampling of a coarse mask, cropped to ``shape`` (h, w)."""
    if factor == 1:
        return mask[: shape[0], : shape[1]].copy()
    up = np.repeat(np.repeat(mask, factor, axis=0), factor, axis=1)
    return up[: shape[0], : shape[1]]


@dataclass
class PyramidImage:
    levels: list[np.ndarray]
    factors: tuple[int, ...] = DEFAULT_FACTORS
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.levels) != len(self.factors):
            raise ValueError("one raster per factor is required")
        if self.factors[0] != 1 or any(b <= a for a, b in zip(self.factors, self.factors[1:])):
            raise ValueError(f"factors must start at 1 and increase strictly, got {self.factors}")
        h0, w0 = self.levels[0].shape[:2]
        for lvl, (raster, f) in enumerate(zip(self.levels, self.factors)):
            if raster.ndim != 3 or raster.shape[2] != 3 or raster.dtype != np.uint8:
                raise ValueError(f"level {lvl} must be an HxWx3 uint8 raster")
            expect = (math.ceil(h0 / f), math.ceil(w0 / f))
            if raster.shape[:2] != expect:
                raise ValueError(f"level {lvl} has shape {raster.shape[:2]}, expected {expect}")

    @classmethod
    def from_level0(cls, raster: np.ndarray, factors=DEFAULT_FACTORS, meta=None) -> "PyramidImage":
        levels = [raster] + [area_downsample(raster, f) for f in factors[1:]]
        return cls(levels, tuple(factors), dict(meta or {}))

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def low_res_level(self) -> int:
        try:
            return self.factors.index(LOW_RES_FACTOR)
        except ValueError:
            raise ValueError("image has no low-resolution (factor 4) level") from None

    def size(self, level: int = 0) -> tuple[int, int]:
        """(width, height) of a level."""
        h, w = self.levels[level].shape[:2]
        return w, h

    def shape(self, level: int = 0) -> tuple[int, int]:
        """(height, width) of a level."""
        return self.levels[level].shape[:2]


def map_region(region: Region, img: PyramidImage, level: int) -> Region:
    """Smallest region at ``level`` covering ``region``."""
    src, dst = img.factors[region.level], img.factors[level]
    x0 = math.floor(region.x * src / dst)
    y0 = math.floor(region.y * src / dst)
    x1 = math.ceil(region.x1 * src / dst)
    y1 = math.ceil(region.y1 * src / dst)
    return Region(level, x0, y0, x1 - x0, y1 - y0)


def reflect_indices(idx: np.ndarray, n: int) -> np.ndarray:
    """Map arbitrary integer indices into ``[0, n)`` by mirroring about the edge pixels."""
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def read_region(img: PyramidImage, region: Region) -> np.ndarray:
    """Read an ``h x w x 3`` raster; pixels outside the level are mirror-padded."""
    if not 0 <= region.level < img.n_levels:
        raise IndexError(f"level {region.level} out of range (image has {img.n_levels})")
    if region.w <= 0 or region.h <= 0:
        raise ValueError(f"region size must be positive, got {region.w}x{region.h}")
    return read_array(img.levels[region.level], region.x, region.y, region.w, region.h)


def read_array(raster: np.ndarray, x: int, y: int, w: int, h: int) -> np.ndarray:
    """Mirror-padded crop of any 2-D or 3-D array."""
    H, W = raster.shape[:2]
    if x >= 0 and y >= 0 and x + w <= W and y + h <= H:
        return raster[y : y + h, x : x + w].copy()
    ys = reflect_indices(np.arange(y, y + h), H)
    xs = reflect_indices(np.arange(x, x + w), W)
    return raster[np.ix_(ys, xs)]


def luminance(rgb: np.ndarray) -> np.ndarray:
    rgb = rgb.astype(np.float32)
    return 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]


def foreground_mask(
    img: PyramidImage,
    sigma: float = 2.0,
    closing_radius: int = 3,
    min_area: int = 64,
    min_contrast: float = 12.0,
) -> np.ndarray:
    """Tissue mask at the low-resolution level.

    Gaussian low-pass of the luminance, Otsu threshold (tissue is darker
    than the glass), morphological closing, then removal of small
    components and filling of enclosed holes. Pale tissue close to the
    threshold would otherwise leave holes that flip between runs.
    """
    low = img.levels[img.low_res_level]
    lum = ndi.gaussian_filter(luminance(low), sigma, mode="nearest")
    if float(lum.max() - lum.min()) < min_contrast:
        return np.zeros(lum.shape, dtype=np.uint8)
    thr = filters.threshold_otsu(lum)
    mask = lum < thr
    mask = morphology.binary_closing(mask, morphology.disk(closing_radius))
    mask = morphology.remove_small_objects(mask, min_size=min_area, connectivity=2)
    mask = ndi.binary_fill_holes(mask)
    return mask.astype(np.uint8)


def apply_mask(img: PyramidImage, mask_low: np.ndarray) -> PyramidImage:
    """Copy of ``img`` with everything outside the low-res mask painted background."""
    low_factor = img.factors[img.low_res_level]
    full = upsample_mask(mask_low, low_factor, img.shape(0))
    levels = []
    for raster, f in zip(img.levels, img.factors):
        keep = mask_low if f == low_factor else mask_to_level(full, f)
        out = raster.copy()
        out[keep == 0] = BACKGROUND_RGB
        levels.append(out)
    return PyramidImage(levels, img.factors, dict(img.meta))


# -- persistence -------------------------------------------------------------

MANIFEST = "manifest.json"
ANNOTATION = "annotation.png"


def save_pyramid(img: PyramidImage, directory, mask: np.ndarray | None = None) -> Path:
    """Write one lossless PNG per level plus ``manifest.json`` (and the annotation if given)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    levels = {}
    for lvl, (raster, f) in enumerate(zip(img.levels, img.factors)):
        name = f"level_{lvl}.png"
        Image.fromarray(raster).save(directory / name, compress_level=1)
        h, w = raster.shape[:2]
        levels[str(lvl)] = {"file": name, "factor": f, "width": w, "height": h}
    manifest = {"levels": levels, "meta": img.meta}
    if mask is not None:
        save_mask(mask, directory / ANNOTATION)
        manifest["annotation"] = ANNOTATION
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def load_pyramid(directory) -> PyramidImage:
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST).read_text())
    entries = [manifest["levels"][k] for k in sorted(manifest["levels"], key=int)]
    levels = [np.asarray(Image.open(directory / e["file"]).convert("RGB")) for e in entries]
    return PyramidImage(levels, tuple(e["factor"] for e in entries), manifest.get("meta", {}))


def load_annotation(directory) -> np.ndarray:
    return load_mask(Path(directory) / ANNOTATION)


def save_mask(mask: np.ndarray, path) -> None:
    Image.fromarray((mask > 0).astype(np.uint8) * 255, mode="L").save(path, compress_level=1)


def load_mask(path) -> np.ndarray:
    return (np.asarray(Image.open(path).convert("L")) > 127).astype(np.uint8)


@dataclass
class Slide:
    """A pyramid with its level-0 annotation and low-resolution tissue mask."""

    wsi_id: str
    image: PyramidImage
    annotation: np.ndarray
    foreground: np.ndarray | None = None

    def __post_init__(self):
        if self.annotation.shape != self.image.shape(0):
            raise ValueError(
                f"annotation {self.annotation.shape} does not match level 0 {self.image.shape(0)}"
            )
        if self.foreground is None:
            self.foreground = foreground_mask(self.image)

    def annotation_at(self, level: int) -> np.ndarray:
        return mask_to_level(self.annotation, self.image.factors[level])

    def foreground_at(self, level: int) -> np.ndarray:
        low = self.image.low_res_level
        ratio = self.image.factors[low] // self.image.factors[level]
        if ratio == 1:
            return self.foreground
        return upsample_mask(self.foreground, ratio, self.image.shape(level))

    @classmethod
    def load(cls, directory, wsi_id: str | None = None) -> "Slide":
        directory = Path(directory)
        return cls(wsi_id or directory.name, load_pyramid(directory), load_annotation(directory))
