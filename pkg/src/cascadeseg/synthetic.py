"""Synthetic kidney-like whole-slide images with pixel-exact object masks.

The generator paints a bean-shaped tissue section on a light background.
The outer band (cortex) carries tubular texture and the sparse objects;
the central region (medulla) is object-free but holds streaky texture and
object-coloured distractor blobs without the boundary ring. Every object
is an ellipse with a dense nucleated tuft, a pale gap and a darker
capsule line, which gives a learnable boundary.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage as ndi

from .pyramid import BACKGROUND_RGB, DEFAULT_FACTORS, PyramidImage, mask_to_level

log = logging.getLogger(__name__)

PALETTE = {
    "background": BACKGROUND_RGB,
    "cortex": (219, 158, 190),
    "medulla": (232, 186, 207),
    "lumen": (246, 232, 240),
    "nucleus": (86, 58, 138),
    "tuft": (168, 92, 163),
    "gap": (246, 236, 242),
    "capsule": (176, 100, 150),
    "distractor": (178, 102, 166),
}


class PlacementError(RuntimeError):
    """Raised when an object cannot be placed within the retry budget."""


@dataclass
class SyntheticSpec:
    width: int = 6000
    height: int = 5000
    n_objects: int = 40
    diameter_mean: float = 300.0
    diameter_std: float = 60.0
    medulla_fraction: float = 0.3
    n_distractors: int | None = None  # default: half the object count
    noise_scales: tuple[float, ...] = (96.0, 24.0, 6.0)
    noise_amplitude: float = 14.0
    palette: dict = field(default_factory=lambda: dict(PALETTE))
    seed: int = 0
    max_attempts: int = 5000

    @property
    def distractors(self) -> int:
        return self.n_objects // 2 if self.n_distractors is None else self.n_distractors

    def to_dict(self) -> dict:
        d = asdict(self)
        d["noise_scales"] = list(self.noise_scales)
        d["palette"] = {k: list(v) for k, v in self.palette.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        if "noise_scales" in d:
            d["noise_scales"] = tuple(d["noise_scales"])
        if "palette" in d:
            d["palette"] = {k: tuple(v) for k, v in d["palette"].items()}
        return cls(**d)


def _value_noise(rng, shape, scale, aspect=1.0):
    """Smooth noise in [-1, 1] with feature size ``scale`` pixels (x stretched by ``aspect``)."""
    h, w = shape
    gh = max(2, int(math.ceil(h / scale)) + 2)
    gw = max(2, int(math.ceil(w / (scale * aspect))) + 2)
    grid = rng.uniform(-1.0, 1.0, size=(gh, gw)).astype(np.float32)
    out = ndi.zoom(grid, (scale, scale * aspect), order=1, grid_mode=False)
    return out[:h, :w]


def _octaves(rng, shape, scales):
    acc = np.zeros(shape, np.float32)
    total = 0.0
    for i, s in enumerate(scales):
        wgt = 0.5**i
        acc += wgt * _value_noise(rng, shape, s)
        total += wgt
    return acc / total


def _tissue_profile(rng):
    """Random star-shaped outline: radius multiplier as a function of angle."""
    amps = rng.uniform(0.015, 0.04, size=3)
    phases = rng.uniform(0, 2 * np.pi, size=3)
    hilum = rng.uniform(0, 2 * np.pi)

    def radius(theta):
        r = np.ones_like(theta, dtype=np.float32)
        for k, a, p in zip((2, 3, 5), amps, phases):
            r += a * np.cos(k * theta + p)
        d = np.angle(np.exp(1j * (theta - hilum)))
        r -= 0.22 * np.exp(-((d / 0.32) ** 2))
        return r

    return radius


def _blend(img, where, color, alpha=1.0):
    c = np.asarray(color, np.float32)
    if np.isscalar(alpha):
        img[where] = (1 - alpha) * img[where] + alpha * c
    else:
        a = alpha[where][:, None]
        img[where] = (1 - a) * img[where] + a * c


def generate_synthetic_wsi(spec: SyntheticSpec, factors=DEFAULT_FACTORS):
    """Render a synthetic slide. Returns ``(PyramidImage, annotation mask at level 0)``."""
    rng = np.random.default_rng(spec.seed)
    H, W = spec.height, spec.width
    pal = spec.palette

    yy, xx = np.mgrid[0:H, 0:W].astype(np.float32)
    cx, cy = W / 2.0, H / 2.0
    ax, ay = 0.44 * W, 0.42 * H
    dx, dy = (xx - cx) / ax, (yy - cy) / ay
    del xx, yy
    rho = np.sqrt(dx * dx + dy * dy)
    theta = np.arctan2(dy, dx)
    del dx, dy
    rel = rho / _tissue_profile(rng)(theta)
    del rho, theta
    tissue = rel <= 1.0
    medulla = rel <= math.sqrt(spec.medulla_fraction)
    cortex = tissue & ~medulla
    del rel

    objects = _place_objects(rng, spec, tissue, cortex, medulla)

    img = np.empty((H, W, 3), np.float32)
    img[:] = pal["background"]
    _blend(img, cortex, pal["cortex"])
    _blend(img, medulla, pal["medulla"])

    # tubular lumens in the cortex, streaks in the medulla
    lumen_field = _value_noise(rng, (H, W), max(4.0, spec.diameter_mean / 25))
    _blend(img, cortex & (lumen_field > 0.55), pal["lumen"], 0.8)
    del lumen_field
    streak = _value_noise(rng, (H, W), max(3.0, spec.diameter_mean / 40), aspect=6.0)
    _blend(img, medulla & (streak > 0.45), pal["lumen"], 0.6)
    del streak

    mask = np.zeros((H, W), np.uint8)
    tuft_region = np.zeros((H, W), bool)
    for obj in objects:
        _paint_object(img, mask, tuft_region, obj, pal, rng)

    nuclei_density = np.where(tissue, 0.0025, 0.0).astype(np.float32)
    nuclei_density[tuft_region] = 0.02
    for d in objects:
        if d["kind"] == "distractor":
            _, sl, inside = _ellipse(d, (H, W))
            nuclei_density[sl][inside] = 0.004
    pts = rng.random((H, W), dtype=np.float32) < nuclei_density
    del nuclei_density
    nuc_sigma = max(0.8, spec.diameter_mean / 200)
    nuc = ndi.gaussian_filter(pts.astype(np.float32), nuc_sigma)
    nuc = np.clip(nuc * (2 * np.pi * nuc_sigma**2) * 0.9, 0, 1)
    del pts
    img += nuc[..., None] * (np.asarray(pal["nucleus"], np.float32) - img)
    del nuc

    shade = _octaves(rng, (H, W), [s * spec.diameter_mean / 300 for s in spec.noise_scales])
    img[tissue] += spec.noise_amplitude * shade[tissue][:, None]
    del shade
    img += rng.normal(0, 3.0, size=(H, W, 1)).astype(np.float32)
    raster = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    del img

    real = [o for o in objects if o["kind"] == "object"]
    meta = {
        "seed": spec.seed,
        "tissue_area_px": int(tissue.sum()),
        "tissue_area_low_res_px": int(mask_to_level(tissue, factors[-1]).sum()),
        "medulla_area_px": int(medulla.sum()),
        "object_count": len(real),
        "distractor_count": len(objects) - len(real),
        "positive_area_px": int(mask.sum()),
        "diameter_mean": spec.diameter_mean,
        "objects": [
            {**{k: (round(float(v), 3) if isinstance(v, float) else v) for k, v in o.items()},
             "in_medulla": bool(medulla[int(o["cy"]), int(o["cx"])])}
            for o in real
        ],
    }
    return PyramidImage.from_level0(raster, factors, meta), mask


def _place_objects(rng, spec, tissue, cortex, medulla):
    """Rejection sampling of non-overlapping ellipses (objects in cortex, distractors in medulla)."""
    H, W = tissue.shape
    # distance (in level-0 px) to the nearest pixel outside each allowed zone, on a coarse grid
    step = 4
    dist_cortex = ndi.distance_transform_edt(cortex[::step, ::step]) * step
    dist_medulla = ndi.distance_transform_edt(medulla[::step, ::step]) * step
    gap = 0.08 * spec.diameter_mean
    placed = []

    def fits(cxp, cyp, r, dist):
        if dist[int(cyp) // step, int(cxp) // step] < r + step:
            return False
        for o in placed:
            if math.hypot(o["cx"] - cxp, o["cy"] - cyp) < r + o["r"] + gap:
                return False
        return True

    plan = [("object", dist_cortex, 1.0)] * spec.n_objects
    plan += [("distractor", dist_medulla, 0.8)] * spec.distractors
    for idx, (kind, dist, scale) in enumerate(plan):
        lo, hi = 0.5 * spec.diameter_mean, 1.5 * spec.diameter_mean
        d = float(np.clip(rng.normal(spec.diameter_mean, spec.diameter_std), lo, hi)) * scale
        r = d / 2
        for _ in range(spec.max_attempts):
            cxp, cyp = rng.uniform(0, W), rng.uniform(0, H)
            if fits(cxp, cyp, r, dist):
                break
        else:
            name = f"object {idx}" if kind == "object" else f"distractor {idx - spec.n_objects}"
            raise PlacementError(
                f"could not place {name} (diameter {d:.0f} px) after {spec.max_attempts} attempts"
            )
        aspect = float(rng.uniform(0.85, 1.0))
        placed.append(
            {
                "kind": kind,
                "cx": float(cxp),
                "cy": float(cyp),
                "r": r,
                "a": r,
                "b": r * aspect,
                "angle": float(rng.uniform(0, np.pi)),
            }
        )
    return placed


def _ellipse(o, shape):
    H, W = shape
    R = int(math.ceil(o["a"])) + 2
    x0, x1 = max(0, int(o["cx"]) - R), min(W, int(o["cx"]) + R + 1)
    y0, y1 = max(0, int(o["cy"]) - R), min(H, int(o["cy"]) + R + 1)
    yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float32)
    ddx, ddy = xx + 0.5 - o["cx"], yy + 0.5 - o["cy"]
    c, s = math.cos(o["angle"]), math.sin(o["angle"])
    u, v = c * ddx + s * ddy, -s * ddx + c * ddy
    rr = np.sqrt((u / o["a"]) ** 2 + (v / o["b"]) ** 2)
    sl = (slice(y0, y1), slice(x0, x1))
    return rr, sl, rr <= 1.0


def _paint_object(img, mask, tuft_region, o, pal, rng):
    rr, sl, inside = _ellipse(o, mask.shape)
    patch = img[sl]
    if o["kind"] == "distractor":
        _blend(patch, inside, pal["distractor"], 0.85)
        return
    # ring widths relative to the radius; capsule at least ~2 px
    cap_w = max(2.0 / o["a"], 0.05)
    gap_w = max(3.0 / o["a"], 0.09)
    tuft = rr < 1.0 - cap_w - gap_w
    gap = (rr >= 1.0 - cap_w - gap_w) & (rr < 1.0 - cap_w)
    capsule = (rr >= 1.0 - cap_w) & inside
    lobes = ndi.zoom(rng.uniform(0, 1, (6, 6)).astype(np.float32),
                     (rr.shape[0] / 6, rr.shape[1] / 6), order=1)[: rr.shape[0], : rr.shape[1]]
    lobes = np.pad(lobes, ((0, rr.shape[0] - lobes.shape[0]), (0, rr.shape[1] - lobes.shape[1])), mode="edge")
    _blend(patch, tuft, pal["tuft"], np.clip(0.75 + 0.25 * lobes, 0, 1))
    _blend(patch, gap, pal["gap"], 0.9)
    _blend(patch, capsule, pal["capsule"], 0.9)
    mask[sl][inside] = 1
    tuft_region[sl] |= tuft
