"""Reference-background perturbation: dilation, margin fill, mixup, masking.

Operates on single H x W x C numpy images in [0, 1] and H x W binary masks.
Every function is pure; randomness comes only from the generator passed in.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, DegenerateInputError, ShapeError


@dataclass
class PerturbParams:
    dilation_radius: int = 2
    sigma_range: tuple = (0.75, 0.95)
    enable_dilation: bool = True
    enable_fill: bool = True
    enable_mixup: bool = True

    def __post_init__(self):
        self.sigma_range = tuple(float(s) for s in self.sigma_range)
        lo, hi = self.sigma_range
        if self.dilation_radius < 0:
            raise ConfigurationError("dilation_radius must be >= 0")
        if not 0 <= lo <= hi <= 1:
            raise ConfigurationError("sigma_range must satisfy 0 <= low <= high <= 1")

    @classmethod
    def disabled(cls, **kw):
        return cls(enable_dilation=False, enable_fill=False, enable_mixup=False, **kw)


def dilate_mask(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation with a (2r+1) x (2r+1) square structuring element."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    mask = np.asarray(mask)
    if radius == 0:
        return mask.copy()
    struct = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    return ndimage.binary_dilation(mask > 0.5, structure=struct).astype(mask.dtype)


def fill_margin(image: np.ndarray, mask: np.ndarray, mask_aug: np.ndarray) -> np.ndarray:
    """Overwrite the ring ``mask_aug - mask`` with the nearest background pixel.

    Background is where ``mask_aug`` is 0. Pixels outside the ring are returned untouched.
    """
    mask = np.asarray(mask) > 0.5
    mask_aug = np.asarray(mask_aug) > 0.5
    if np.any(mask & ~mask_aug):
        raise ValueError("mask_aug must contain mask")
    ring = mask_aug & ~mask
    out = np.array(image, copy=True)
    if not ring.any():
        return out
    if mask_aug.all():
        raise DegenerateInputError("dilated mask covers the whole image; no background to fill from")
    _, (iy, ix) = ndimage.distance_transform_edt(mask_aug, return_indices=True)
    out[ring] = image[iy[ring], ix[ring]]
    return out


def mixup(image: np.ndarray, other: np.ndarray, sigma: float) -> np.ndarray:
    """``sigma * image + (1 - sigma) * other``."""
    image = np.asarray(image)
    other = np.asarray(other)
    if image.shape != other.shape:
        raise ShapeError(f"mixup shapes differ: {image.shape} vs {other.shape}")
    if not 0.0 <= sigma <= 1.0:
        raise ValueError("sigma must lie in [0, 1]")
    return (sigma * image + (1.0 - sigma) * other).astype(image.dtype)


def sample_sigma(params: PerturbParams, rng: np.random.Generator) -> float:
    lo, hi = params.sigma_range
    return float(rng.uniform(lo, hi))


def perturb_background(record, other: np.ndarray, params: PerturbParams, rng: np.random.Generator) -> dict:
    """Build the reference-branch input from a record.

    Returns ``{"pg_input", "mask_aug", "sigma_used"}``; ``sigma_used`` is 1.0
    when mixup is disabled. The record itself is never modified.
    """
    image = np.asarray(record.image)
    mask = np.asarray(record.mask)
    mask_aug = dilate_mask(mask, params.dilation_radius) if params.enable_dilation else mask.copy()
    work = fill_margin(image, mask, mask_aug) if params.enable_fill else image.copy()
    sigma = 1.0
    if params.enable_mixup:
        sigma = sample_sigma(params, rng)
        work = mixup(work, other, sigma)
    keep = (1.0 - (mask_aug > 0.5)).astype(work.dtype)
    return {"pg_input": work * keep[..., None], "mask_aug": mask_aug, "sigma_used": sigma}
