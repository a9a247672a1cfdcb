"""Whole-slide inference: single networks and two-stage cascades.

SN1/SN2 run U-Net-D over the whole tissue at high resolution. CN1/CN2 first
find candidate regions at low resolution (sliding-window classifier or
U-Net-S) and run U-Net-D only on tiles that touch a candidate.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage as ndi

from .augmentation import Foveator, FoveationConfig
from .networks import (
    SW_CNN,
    UNET_D,
    UNET_S,
    NetworkSpec,
    receptive_margin,
    unet_output_size,
    valid_input_sizes,
)
from .pyramid import PyramidImage, Region, foreground_mask, read_array, upsample_mask
from .sampling import OBJECT, UNIFORM

SN1, SN2, CN1, CN2 = "SN1", "SN2", "CN1", "CN2"


@dataclass(frozen=True)
class PipelineKind:
    name: str
    segmenter_strategy: str
    detector: str | None = None  # network name of the first stage
    detector_strategy: str | None = None

    @property
    def is_cascade(self) -> bool:
        return self.detector is not None

    def models(self) -> list[tuple[str, str]]:
        """(network, training strategy) pairs the pipeline needs, detector first."""
        out = [(self.detector, self.detector_strategy)] if self.is_cascade else []
        return out + [(UNET_D, self.segmenter_strategy)]


PIPELINES = {
    SN1: PipelineKind(SN1, OBJECT),
    SN2: PipelineKind(SN2, UNIFORM),
    CN1: PipelineKind(CN1, OBJECT, SW_CNN, UNIFORM),
    CN2: PipelineKind(CN2, OBJECT, UNET_S, UNIFORM),
}


@dataclass
class LabelMap:
    """Binary segmentation of one pyramid level."""

    labels: np.ndarray
    level: int
    tiles_evaluated: int = 0
    tiles_total: int = 0
    stage_seconds: dict = field(default_factory=dict)

    @property
    def pixels_evaluated(self) -> int:
        return int(self.stage_seconds.get("_pixels", 0))


@dataclass
class DetectionMap:
    mask: np.ndarray  # low-resolution candidate mask
    detector: str
    step: int | None = None
    evaluated: int = 0
    seconds: float = 0.0


def _fcn_geometry(model, tile_size):
    spec: NetworkSpec = model.spec
    if not spec.is_fcn:
        raise ValueError(f"{spec.name} is not fully convolutional")
    tile = tile_size or spec.input_size
    out = unet_output_size(tile, spec.depth)
    if out is None:
        raise ValueError(
            f"{spec.name} cannot run on {tile}px tiles; valid tile sizes near it: "
            f"{valid_input_sizes(spec.depth, tile)}"
        )
    return tile, out, (tile - out) // 2


def _forward_labels(model, batch: list[np.ndarray]) -> np.ndarray:
    x = torch.from_numpy(np.stack(batch)).permute(0, 3, 1, 2).float()
    with torch.no_grad():
        return model(x).argmax(1).numpy().astype(np.uint8)


def tile_grid(shape, out: int) -> list[tuple[int, int]]:
    """Row-major origins (y, x) of output footprints that abut and cover ``shape``."""
    h, w = shape
    return [(y, x) for y in range(0, h, out) for x in range(0, w, out)]


def run_fcn_tiled(
    img: PyramidImage,
    model,
    level: int,
    foreground: np.ndarray | None = None,
    gate: np.ndarray | None = None,
    tile_size: int | None = None,
    batch_size: int = 1,
    order=None,
) -> LabelMap:
    """Overlap-tile inference of an FCN over one level.

    Output footprints abut exactly, inputs extend by the receptive margin
    (mirror-padded at the image border), so every pixel is predicted once.
    Only tiles whose footprint touches the tissue foreground (and ``gate``,
    when given) are evaluated; pixels outside them are 0.

    ``order`` may be an integer seed to evaluate tiles in shuffled order.
    """
    if not 0 <= level < img.n_levels:
        raise IndexError(f"level {level} does not exist")
    model.eval()
    tile, out, margin = _fcn_geometry(model, tile_size)
    t0 = time.perf_counter()
    raster = img.levels[level]
    shape = raster.shape[:2]
    if foreground is None:
        foreground = foreground_mask(img)
    low = img.low_res_level
    allowed = upsample_mask(foreground, img.factors[low] // img.factors[level], shape).astype(bool)
    if gate is not None:
        allowed &= gate.astype(bool)
    grid = tile_grid(shape, out)
    todo = [(y, x) for y, x in grid if allowed[y : y + out, x : x + out].any()]
    if order is not None:
        perm = np.random.default_rng(order).permutation(len(todo))
        todo = [todo[i] for i in perm]
    labels = np.zeros(shape, np.uint8)
    for start in range(0, len(todo), batch_size):
        chunk = todo[start : start + batch_size]
        inputs = [read_array(raster, x - margin, y - margin, tile, tile) for y, x in chunk]
        for (y, x), lab in zip(chunk, _forward_labels(model, inputs)):
            h, w = min(out, shape[0] - y), min(out, shape[1] - x)
            labels[y : y + h, x : x + w] = lab[:h, :w]
    labels &= allowed
    return LabelMap(
        labels, level, len(todo), len(grid),
        {"segmentation": time.perf_counter() - t0, "_pixels": len(todo) * out * out},
    )


def run_sw_detection(
    img: PyramidImage,
    model,
    step: int = 5,
    foreground: np.ndarray | None = None,
    batch_size: int = 100,
    foveation: FoveationConfig = FoveationConfig(),
) -> DetectionMap:
    """Classify foveated windows centred on a ``step``-pixel grid of the low-resolution level.

    Each low-resolution pixel takes the decision of its nearest grid point,
    and the result is restricted to the tissue foreground.
    """
    if model.spec.name != SW_CNN:
        raise ValueError(f"sliding-window detection needs an SW-CNN, got {model.spec.name}")
    model.eval()
    t0 = time.perf_counter()
    low = img.low_res_level
    raster = img.levels[low]
    h, w = raster.shape[:2]
    if foreground is None:
        foreground = foreground_mask(img)
    ny, nx = h // step, w // step
    cy = np.arange(ny) * step + step // 2
    cx = np.arange(nx) * step + step // 2
    grid = np.zeros((ny, nx), np.uint8)
    active = np.argwhere(foreground[np.ix_(cy, cx)] > 0)
    if len(active):
        fov = Foveator(raster, foveation)
        for start in range(0, len(active), batch_size):
            idx = active[start : start + batch_size]
            windows = fov(np.stack([cy[idx[:, 0]], cx[idx[:, 1]]], axis=1))
            windows = np.clip(np.rint(windows), 0, 255).astype(np.uint8)
            grid[idx[:, 0], idx[:, 1]] = _forward_labels(model, list(windows))
    mask = fill_from_grid(grid, step, (h, w)) & foreground.astype(np.uint8)
    return DetectionMap(mask, SW_CNN, step, len(active), time.perf_counter() - t0)


def fill_from_grid(grid: np.ndarray, step: int, shape) -> np.ndarray:
    """Each pixel takes the value of the nearest grid point (grid point i sits at i*step + step//2)."""
    h, w = shape
    ny, nx = grid.shape
    if ny == 0 or nx == 0:
        return np.zeros(shape, np.uint8)
    iy = np.minimum(np.arange(h) // step, ny - 1)
    ix = np.minimum(np.arange(w) // step, nx - 1)
    return grid[np.ix_(iy, ix)].astype(np.uint8)


def run_fcn_detection(img: PyramidImage, model, foreground=None, tile_size=None) -> DetectionMap:
    """First-stage FCN (U-Net-S) on the low-resolution level."""
    t0 = time.perf_counter()
    lm = run_fcn_tiled(img, model, img.low_res_level, foreground, tile_size=tile_size)
    return DetectionMap(lm.labels, model.spec.name, None, lm.tiles_evaluated, time.perf_counter() - t0)


def detect_candidates(
    det: DetectionMap | np.ndarray,
    factor: int = 4,
    dilation: int = 8,
    margin: int = 92,
) -> list[Region]:
    """Level-0 regions around detected components.

    Each 8-connected component's bounding box is grown by ``dilation``
    low-resolution pixels, scaled by ``factor``, grown by the segmenter's
    receptive ``margin``, and overlapping boxes are merged.
    """
    mask = det.mask if isinstance(det, DetectionMap) else det
    labels, n = ndi.label(mask > 0, structure=np.ones((3, 3), bool))
    boxes = []
    for sl in ndi.find_objects(labels):
        if sl is None:
            continue
        ys, xs = sl
        r = Region(0, xs.start * factor, ys.start * factor,
                   (xs.stop - xs.start) * factor, (ys.stop - ys.start) * factor)
        boxes.append(r.grow(dilation * factor + margin))
    return merge_regions(boxes)


def merge_regions(boxes: list[Region]) -> list[Region]:
    boxes = list(boxes)
    merged = True
    while merged:
        merged = False
        out: list[Region] = []
        for b in boxes:
            for i, o in enumerate(out):
                if o.intersects(b):
                    out[i] = o.union(b)
                    merged = True
                    break
            else:
                out.append(b)
        boxes = out
    return sorted(boxes, key=lambda r: (r.y, r.x))


def gate_mask(regions: list[Region], shape, margin: int) -> np.ndarray:
    """Level-0 mask of the candidate cores (regions shrunk back by the receptive margin)."""
    h, w = shape
    gate = np.zeros(shape, bool)
    for r in regions:
        y0, y1 = max(0, r.y + margin), min(h, r.y1 - margin)
        x0, x1 = max(0, r.x + margin), min(w, r.x1 - margin)
        if y1 > y0 and x1 > x0:
            gate[y0:y1, x0:x1] = True
    return gate


def run_cascade(
    img: PyramidImage,
    detector,
    segmenter,
    kind: str,
    foreground: np.ndarray | None = None,
    step: int = 5,
    dilation: int = 8,
    tile_size: int | None = None,
    detector_tile_size: int | None = None,
    foveation: FoveationConfig = FoveationConfig(),
) -> LabelMap:
    """Detect candidates at low resolution, then segment only those regions at level 0."""
    pk = PIPELINES[kind]
    if not pk.is_cascade:
        raise ValueError(f"{kind} is not a cascade")
    if detector.spec.name != pk.detector or segmenter.spec.name != UNET_D:
        raise ValueError(f"{kind} needs {pk.detector} -> {UNET_D}, got "
                         f"{detector.spec.name} -> {segmenter.spec.name}")
    if foreground is None:
        foreground = foreground_mask(img)
    if kind == CN1:
        det = run_sw_detection(img, detector, step, foreground, foveation=foveation)
    else:
        det = run_fcn_detection(img, detector, foreground, detector_tile_size)
    _, _, margin = _fcn_geometry(segmenter, tile_size)
    factor = img.factors[img.low_res_level]
    regions = detect_candidates(det, factor, dilation, margin)
    shape = img.shape(0)
    t0 = time.perf_counter()
    if not regions:
        lm = LabelMap(np.zeros(shape, np.uint8), 0, 0, len(tile_grid(shape, _fcn_geometry(segmenter, tile_size)[1])))
        lm.stage_seconds = {"segmentation": time.perf_counter() - t0, "_pixels": 0}
    else:
        lm = run_fcn_tiled(img, segmenter, 0, foreground, gate_mask(regions, shape, margin), tile_size)
    lm.stage_seconds = {"detection": det.seconds, **lm.stage_seconds}
    lm.stage_seconds["_candidates"] = len(regions)
    return lm


def run_pipeline(kind: str, img: PyramidImage, models: dict, foreground=None, **kw) -> LabelMap:
    """Dispatch by pipeline name; ``models`` maps "detector"/"segmenter" to networks."""
    if foreground is None:
        foreground = foreground_mask(img)
    if PIPELINES[kind].is_cascade:
        return run_cascade(img, models["detector"], models["segmenter"], kind, foreground, **kw)
    keep = {k: v for k, v in kw.items() if k in ("tile_size",)}
    return run_fcn_tiled(img, models["segmenter"], 0, foreground, **keep)


def stage_times(lm: LabelMap) -> dict:
    return {k: v for k, v in lm.stage_seconds.items() if not k.startswith("_")}


def ceil_div(a: int, b: int) -> int:
    return math.ceil(a / b)
