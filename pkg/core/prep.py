"""
Intensity normalization and value-range region masking.
"""
import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict

import numpy as np
from scipy import ndimage

from config import PREP
from core.errors import InvalidArgumentError
from core.models import Image, Mask

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NormSpec:
    """Clipping, output range and region-mask settings"""
    clip_sigmas: float = PREP['CLIP_SIGMAS']
    lower: float = PREP['MASK_LOWER']
    upper: float = PREP['MASK_UPPER']
    dilation_radius: int = PREP['DILATION_RADIUS']

    def __post_init__(self):
        if not (0.0 <= self.lower < self.upper <= 1.0):
            raise InvalidArgumentError(f"Mask bounds must satisfy 0 <= lower < upper <= 1, got [{self.lower}, {self.upper}]")
        if self.dilation_radius < 0:
            raise InvalidArgumentError(f"Dilation radius must be >= 0, got {self.dilation_radius}")
        if not self.clip_sigmas > 0:
            raise InvalidArgumentError(f"Clip width must be positive, got {self.clip_sigmas}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def normalize_volume(img: Image, spec: NormSpec = NormSpec()) -> Image:
    """
    Clip to mean +/- clip_sigmas * std, then min-max map to [0, 1].

    Constant images map to all zeros.
    """
    data = img.data.astype(np.float64)
    mean = float(np.mean(data))
    std = float(np.std(data))
    clipped = np.clip(data, mean - spec.clip_sigmas * std, mean + spec.clip_sigmas * std)
    low = float(clipped.min())
    high = float(clipped.max())
    if high <= low:
        logger.warning("Constant image passed to normalize_volume, returning zeros")
        return Image(np.zeros_like(data, dtype=img.dtype))
    return Image(((clipped - low) / (high - low)).astype(img.dtype))


def disk_structure(radius: int) -> np.ndarray:
    """2D structuring element of offsets with Euclidean norm <= radius"""
    offsets = np.arange(-radius, radius + 1)
    rows, cols = np.meshgrid(offsets, offsets, indexing='ij')
    return rows * rows + cols * cols <= radius * radius


def dilate(mask: Mask, radius: int) -> Mask:
    """Binary dilation of a 2D mask by a disk"""
    if radius == 0 or mask.count == 0:
        return Mask(mask.flags.copy())
    return Mask(ndimage.binary_dilation(mask.flags, structure=disk_structure(radius)))


def value_range_mask(img: Image, spec: NormSpec = NormSpec()) -> Mask:
    """
    Flag points with lower <= value <= upper; 2D masks are then dilated by a
    disk of the configured radius.
    """
    flags = (img.data >= spec.lower) & (img.data <= spec.upper)
    mask = Mask(flags)
    if img.ndim == 2 and spec.dilation_radius > 0:
        mask = dilate(mask, spec.dilation_radius)
    logger.debug(f"Value-range mask keeps {mask.count} of {img.data.size} points")
    return mask
