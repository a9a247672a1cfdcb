"""Training-time augmentation: dihedral transforms, elastic warps and foveation."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import ndimage as ndi

# (quarter turns, flip) for the eight elements of the dihedral group D4
DIHEDRAL = tuple((k, flip) for flip in (False, True) for k in range(4))


def apply_dihedral(arr: np.ndarray, k: int, flip: bool) -> np.ndarray:
    """Rotate by ``k`` quarter turns, then optionally mirror left-right (first two axes)."""
    out = np.rot90(arr, k, axes=(0, 1))
    if flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def compose_dihedral(a: tuple[int, bool], b: tuple[int, bool]) -> tuple[int, bool]:
    """Group element equal to applying ``a`` first and ``b`` second."""
    ka, fa = a
    kb, fb = b
    # rot(k) . flip == flip . rot(-k)
    return ((ka - kb) % 4 if fa else (ka + kb) % 4, fa != fb)


def dihedral_variants(patch: np.ndarray, label: np.ndarray):
    """All eight D4 images of an aligned (patch, label) pair."""
    if patch.shape[0] != patch.shape[1]:
        raise ValueError(f"dihedral transforms need a square patch, got {patch.shape[:2]}")
    if label.shape[0] != label.shape[1]:
        raise ValueError(f"label must be square, got {label.shape[:2]}")
    return [(apply_dihedral(patch, k, f), apply_dihedral(label, k, f)) for k, f in DIHEDRAL]


@dataclass
class DisplacementField:
    """Per-pixel sampling offsets in pixels; ``dx`` is along x (columns)."""

    dx: np.ndarray
    dy: np.ndarray

    @property
    def shape(self):
        return self.dx.shape

    @property
    def max_magnitude(self) -> float:
        return float(np.sqrt(self.dx**2 + self.dy**2).max())

    @classmethod
    def zeros(cls, shape) -> "DisplacementField":
        return cls(np.zeros(shape, np.float32), np.zeros(shape, np.float32))

    @classmethod
    def uniform(cls, shape, dx: float, dy: float) -> "DisplacementField":
        return cls(np.full(shape, dx, np.float32), np.full(shape, dy, np.float32))


def random_displacement_field(shape, rng, grid: int = 8, max_displacement: float = 12.0):
    """Smooth random field: i.i.d. offsets on a coarse grid, upsampled, smoothed, rescaled.

    The largest vector of the result has length ``max_displacement``.
    """
    h, w = shape
    comps = []
    for _ in range(2):
        coarse = rng.uniform(-1.0, 1.0, size=(grid, grid))
        up = ndi.zoom(coarse, (h / grid, w / grid), order=3, mode="mirror", grid_mode=True)[:h, :w]
        up = ndi.gaussian_filter(up, sigma=(h / grid / 2, w / grid / 2), mode="mirror")
        comps.append(up)
    dx, dy = comps
    mag = np.sqrt(dx**2 + dy**2).max()
    scale = max_displacement / mag if mag > 0 else 0.0
    return DisplacementField((dx * scale).astype(np.float32), (dy * scale).astype(np.float32))


def elastic_deform(patch: np.ndarray, label: np.ndarray, field: DisplacementField):
    """Warp ``out[y, x] = in[y + dy, x + dx]``; bilinear for the image, nearest for the label.

    Samples falling outside the patch are mirrored about the edge pixels.
    """
    if patch.shape[:2] != field.shape or label.shape[:2] != field.shape:
        raise ValueError(
            f"field {field.shape} does not match patch {patch.shape[:2]} / label {label.shape[:2]}"
        )
    h, w = field.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    coords = np.stack([yy + field.dy, xx + field.dx])
    if patch.ndim == 2:
        warped = ndi.map_coordinates(patch.astype(np.float32), coords, order=1, mode="mirror")
    else:
        warped = np.stack(
            [
                ndi.map_coordinates(patch[..., c].astype(np.float32), coords, order=1, mode="mirror")
                for c in range(patch.shape[2])
            ],
            axis=-1,
        )
    if np.issubdtype(patch.dtype, np.integer):
        warped = np.clip(np.rint(warped), 0, np.iinfo(patch.dtype).max)
    new_label = ndi.map_coordinates(label, coords, order=0, mode="mirror")
    return warped.astype(patch.dtype), new_label.astype(label.dtype)


# -- foveation ---------------------------------------------------------------


@dataclass(frozen=True)
class FoveationConfig:
    output_size: int = 95
    context_factor: float = 2.0
    sigma_range: tuple[float, float] = (1.0, 9.0)
    n_sigmas: int = 5
    blur: bool = True

    def __post_init__(self):
        if self.context_factor < 1:
            raise ValueError("context_factor must be >= 1")
        lo, hi = self.sigma_range
        if not 0 < lo <= hi:
            raise ValueError(f"invalid sigma_range {self.sigma_range}")

    @property
    def context_size(self) -> int:
        # same parity as the output so both windows share an exact centre pixel
        s = int(round(self.output_size * self.context_factor))
        return s + (s - self.output_size) % 2

    @property
    def sigmas(self) -> np.ndarray:
        return np.linspace(*self.sigma_range, self.n_sigmas)


@lru_cache(maxsize=8)
def _plan(cfg: FoveationConfig):
    """Per output pixel: source offset from the window's centre pixel and the two blur-bank
    entries (with interpolation weight) that realise its blur strength."""
    n, src = cfg.output_size, cfg.context_size
    half_out, half_src = n / 2.0, src / 2.0
    c = (np.arange(n) + 0.5) - half_out
    v, u = np.meshgrid(c, c, indexing="ij")
    # Chebyshev radius keeps the square output mapped onto the square context window
    r = np.maximum(np.abs(u), np.abs(v))
    # local stretch grows linearly with radius: g(r) = r + a r^2 / 2, g(half_out) = half_src
    a = 2.0 * (half_src - half_out) / half_out**2
    scale = 1.0 + 0.5 * a * r
    # output pixel centres sit at half-integers around the centre pixel
    shift = (n // 2) - (half_out - 0.5)
    sy = (v + shift) * scale
    sx = (u + shift) * scale

    n_bank = cfg.n_sigmas if cfg.blur else 1
    if n_bank == 1:
        zero = np.zeros((n, n), int)
        return sy, sx, zero, zero, np.zeros((n, n))
    rho = np.clip(np.hypot(u, v) / half_out, 0.0, 1.0)
    pos = np.interp(blur_sigma(cfg, rho), cfg.sigmas, np.arange(n_bank))
    lo = np.minimum(np.floor(pos).astype(int), n_bank - 2)
    return sy, sx, lo, lo + 1, pos - lo


def blur_sigma(cfg: FoveationConfig, rho):
    """Blur standard deviation at normalised radius ``rho`` in [0, 1]."""
    lo, hi = cfg.sigma_range
    return lo + (hi - lo) * np.asarray(rho)


def blur_bank(image: np.ndarray, cfg: FoveationConfig) -> np.ndarray:
    """Stack of Gaussian-blurred copies of ``image`` (HxWxC float32), one per sigma."""
    image = image.astype(np.float32)
    if not cfg.blur:
        return image[None]
    return np.stack(
        [ndi.gaussian_filter(image, (s, s, 0), mode="mirror") for s in cfg.sigmas]
    )


def foveate(patch: np.ndarray, cfg: FoveationConfig = FoveationConfig()) -> np.ndarray:
    """Map a ``context_size`` window to a foveated ``output_size`` input.

    The centre is sampled at native resolution with the weakest blur; both
    the sampling step and the blur grow towards the periphery.
    """
    need = cfg.context_size
    if patch.shape[0] < need or patch.shape[1] < need:
        raise ValueError(f"foveation needs a {need}x{need} context window, got {patch.shape[:2]}")
    y0 = (patch.shape[0] - need) // 2
    x0 = (patch.shape[1] - need) // 2
    window = patch[y0 : y0 + need, x0 : x0 + need]
    if window.ndim == 2:
        window = window[..., None]
    bank = blur_bank(window, cfg)
    out = sample_bank(bank, cfg)
    out = out if patch.ndim == 3 else out[..., 0]
    if np.issubdtype(patch.dtype, np.integer):
        return np.clip(np.rint(out), 0, 255).astype(patch.dtype)
    return out.astype(np.float32)


def sample_bank(bank: np.ndarray, cfg: FoveationConfig) -> np.ndarray:
    """Sample a blur bank (S x H x W x C) through the foveation plan."""
    sy, sx, lo, hi, frac = _plan(cfg)
    coords = np.stack([sy, sx]) + bank.shape[1] // 2
    n = cfg.output_size
    out = np.zeros((n, n, bank.shape[-1]), np.float32)
    for i in range(bank.shape[0]):
        w = np.where(lo == i, 1 - frac, 0.0) + np.where(hi == i, frac, 0.0)
        if bank.shape[0] == 1:
            w = np.ones((n, n))
        if not w.any():
            continue
        for ch in range(bank.shape[-1]):
            out[..., ch] += w * ndi.map_coordinates(bank[i, ..., ch], coords, order=1, mode="mirror")
    return out


class Foveator:
    """Batched foveation of many windows from one image.

    The blur bank is computed once for the whole image; each output pixel is
    a fixed weighted sum of eight bank pixels (two blur levels, bilinear) at
    integer offsets from the window centre, so a batch is a single gather.
    """

    def __init__(self, image: np.ndarray, cfg: FoveationConfig = FoveationConfig()):
        self.cfg = cfg
        self.pad = cfg.context_size // 2 + 2
        pad = ((self.pad, self.pad), (self.pad, self.pad), (0, 0))
        self.bank = blur_bank(np.pad(image.astype(np.float32), pad, mode="reflect"), cfg)
        self._build_taps()

    def _build_taps(self):
        sy, sx, lo, hi, frac = _plan(self.cfg)
        y0, x0 = np.floor(sy), np.floor(sx)
        fy, fx = sy - y0, sx - x0
        _, hp, wp, _ = self.bank.shape
        offsets, weights = [], []
        for b, wb in ((lo, 1 - frac), (hi, frac)):
            for dy, wy in ((0, 1 - fy), (1, fy)):
                for dx, wx in ((0, 1 - fx), (1, fx)):
                    flat = b * hp * wp + (y0 + dy).astype(np.int64) * wp + (x0 + dx).astype(np.int64)
                    offsets.append(flat.ravel())
                    weights.append((wb * wy * wx).ravel())
        self.offsets = np.stack(offsets, axis=1)  # pixels x taps
        self.weights = np.stack(weights, axis=1).astype(np.float32)
        self.channels = [np.ascontiguousarray(self.bank[..., c]).ravel() for c in range(self.bank.shape[-1])]

    def __call__(self, centers_yx) -> np.ndarray:
        """Foveated windows centred on integer pixels; returns B x n x n x C float32."""
        centers = np.asarray(centers_yx, np.int64).reshape(-1, 2) + self.pad
        n = self.cfg.output_size
        wp = self.bank.shape[2]
        idx = self.offsets[None] + (centers[:, 0] * wp + centers[:, 1])[:, None, None]
        out = np.stack([np.einsum("bpt,pt->bp", ch.take(idx), self.weights) for ch in self.channels], axis=-1)
        return out.reshape(len(centers), n, n, -1)
