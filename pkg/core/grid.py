"""
Grid resampling and filtering primitives: area-average downsampling,
multilinear interpolation with border clamping, field upsampling and
zero-padded windowed sums.
"""
import itertools
import logging
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from core.errors import InvalidArgumentError, InvalidScaleError, InvalidWindowError
from core.models import DisplacementField, Image

logger = logging.getLogger(__name__)

WindowSpec = Union[int, Sequence[int]]

# Slack for floor(dim * s) when s is a binary fraction represented inexactly
_FLOOR_SLACK = 1e-9


def downsampled_dims(dims: Sequence[int], s: float) -> Tuple[int, ...]:
    """Extents floor(dim * s) of a grid resized by scale factor s"""
    if not np.isfinite(s) or s <= 0 or s > 1:
        raise InvalidScaleError(f"Scale factor must lie in (0, 1], got {s}")
    out = tuple(int(np.floor(d * s + _FLOOR_SLACK)) for d in dims)
    if any(extent < 1 for extent in out):
        raise InvalidScaleError(f"Scale {s} collapses grid {tuple(dims)} to {out}")
    return out


def _pooling_matrix(in_extent: int, out_extent: int, s: float, dtype) -> np.ndarray:
    """Row j averages source pixels overlapping [j/s, (j+1)/s), weighted by overlap"""
    starts = np.arange(out_extent) / s
    stops = (np.arange(out_extent) + 1) / s
    left = np.arange(in_extent)
    overlap = np.minimum(left[None, :] + 1, stops[:, None]) - np.maximum(left[None, :], starts[:, None])
    overlap = np.clip(overlap, 0.0, None)
    return (overlap / overlap.sum(axis=1, keepdims=True)).astype(dtype)


def _interpolation_matrix(in_extent: int, out_extent: int, factor: float, dtype) -> np.ndarray:
    """Linear interpolation rows for center-aligned upsampling with edge clamping"""
    matrix = np.zeros((out_extent, in_extent), dtype=dtype)
    if in_extent == 1:
        matrix[:, 0] = 1.0
        return matrix
    source = np.clip((np.arange(out_extent) + 0.5) / factor - 0.5, 0.0, in_extent - 1)
    low = np.minimum(np.floor(source).astype(np.intp), in_extent - 2)
    frac = source - low
    rows = np.arange(out_extent)
    matrix[rows, low] += 1.0 - frac
    matrix[rows, low + 1] += frac
    return matrix


def _apply_along_axis(data: np.ndarray, matrix: np.ndarray, axis: int) -> np.ndarray:
    return np.moveaxis(np.tensordot(matrix, data, axes=([1], [axis])), 0, axis)


def downsample(img: Image, s: float) -> Image:
    """
    Area-average pooling to extents floor(dim * s).

    Args:
        img: Image to resize
        s: Scale factor in (0, 1]; s = 1 returns a copy

    Returns:
        Pooled image
    """
    out_dims = downsampled_dims(img.dims, s)
    if s == 1:
        return img.copy()
    data = img.data
    for axis, (in_extent, out_extent) in enumerate(zip(img.dims, out_dims)):
        data = _apply_along_axis(data, _pooling_matrix(in_extent, out_extent, s, data.dtype), axis)
    return Image(data)


def upsample_field(
    f: DisplacementField,
    factor: float,
    out_dims: Optional[Sequence[int]] = None
) -> DisplacementField:
    """
    Spatially upsample a field by linear interpolation.

    Vector components are not rescaled; the caller applies any unit change.
    Output point x samples the source at (x + 0.5) / factor - 0.5, clamped
    to the source border.

    Args:
        f: Field to upsample
        factor: Upsampling factor 1/s >= 1
        out_dims: Target extents (default round(dim * factor))

    Returns:
        Field on the target grid, scale tag multiplied by factor
    """
    if not np.isfinite(factor) or factor < 1:
        raise InvalidArgumentError(f"Upsampling factor must be finite and >= 1, got {factor}")
    if out_dims is None:
        out_dims = tuple(int(round(d * factor)) for d in f.dims)
    out_dims = tuple(int(d) for d in out_dims)
    if len(out_dims) != f.ndim:
        raise InvalidArgumentError(f"Target extents {out_dims} do not match field dimensionality {f.ndim}")
    scale = min(1.0, f.scale * factor)
    if factor == 1 and out_dims == f.dims:
        return DisplacementField(f.vectors.copy(), scale=scale)
    data = f.vectors
    for axis, (in_extent, out_extent) in enumerate(zip(f.dims, out_dims)):
        data = _apply_along_axis(data, _interpolation_matrix(in_extent, out_extent, factor, data.dtype), axis)
    return DisplacementField(data, scale=scale)


def _corner_setup(coords: Sequence[np.ndarray], dims: Sequence[int]):
    """Per-axis lower/upper neighbor indices, fractions and in-domain flags"""
    lows, highs, fracs, inside = [], [], [], []
    for coord, extent in zip(coords, dims):
        inside.append((coord >= 0) & (coord <= extent - 1))
        clamped = np.clip(coord, 0, extent - 1)
        if extent == 1:
            low = np.zeros(coord.shape, dtype=np.intp)
            lows.append(low)
            highs.append(low)
            fracs.append(np.zeros_like(clamped))
            continue
        low = np.minimum(np.floor(clamped).astype(np.intp), extent - 2)
        lows.append(low)
        highs.append(low + 1)
        fracs.append(clamped - low)
    return lows, highs, fracs, inside


def interpolate(data: np.ndarray, coords: Sequence[np.ndarray]) -> np.ndarray:
    """
    Multilinear interpolation of `data` at fractional grid coordinates.

    Args:
        data: Array of shape (*dims) or (*dims, k)
        coords: One coordinate array per spatial axis, all the same shape

    Returns:
        Interpolated values of shape coords[0].shape (+ (k,) for vector data)
    """
    ndim = len(coords)
    lows, highs, fracs, _ = _corner_setup(coords, data.shape[:ndim])
    result = None
    for corner in itertools.product((0, 1), repeat=ndim):
        index = tuple(highs[a] if bit else lows[a] for a, bit in enumerate(corner))
        weight = None
        for a, bit in enumerate(corner):
            w = fracs[a] if bit else 1.0 - fracs[a]
            weight = w if weight is None else weight * w
        values = data[index]
        term = values * weight[..., None] if values.ndim > weight.ndim else values * weight
        result = term if result is None else result + term
    return result


def interpolate_gradient(data: np.ndarray, coords: Sequence[np.ndarray]) -> List[np.ndarray]:
    """
    Partial derivatives of scalar multilinear interpolation w.r.t. each coordinate.

    The derivative along an axis is zero where that coordinate was clamped
    (outside [0, extent - 1]) or the axis has a single sample.
    """
    ndim = len(coords)
    dims = data.shape[:ndim]
    lows, highs, fracs, inside = _corner_setup(coords, dims)
    partials = []
    for axis in range(ndim):
        derivative = None
        for corner in itertools.product((0, 1), repeat=ndim):
            index = tuple(highs[a] if bit else lows[a] for a, bit in enumerate(corner))
            weight = None
            for a, bit in enumerate(corner):
                if a == axis:
                    w = np.ones_like(fracs[a]) if bit else -np.ones_like(fracs[a])
                else:
                    w = fracs[a] if bit else 1.0 - fracs[a]
                weight = w if weight is None else weight * w
            term = data[index] * weight
            derivative = term if derivative is None else derivative + term
        if dims[axis] == 1:
            derivative = np.zeros_like(derivative)
        partials.append(np.where(inside[axis], derivative, 0.0))
    return partials


def sample_field_at(f: DisplacementField, points: np.ndarray) -> np.ndarray:
    """
    Interpolate field vectors at arbitrary points (border clamped).

    Args:
        f: Field to sample
        points: Array of shape (..., n) with grid-index coordinates

    Returns:
        Array of shape (..., n) with interpolated vectors
    """
    points = np.asarray(points, dtype=f.dtype)
    if points.shape[-1] != f.ndim:
        raise InvalidArgumentError(f"Query points must have {f.ndim} components, got shape {points.shape}")
    if not np.all(np.isfinite(points)):
        raise InvalidArgumentError("Query points must be finite")
    coords = [points[..., a] for a in range(f.ndim)]
    return interpolate(f.vectors, coords)


def grid_points(dims: Sequence[int], dtype=np.float64) -> np.ndarray:
    """Identity coordinates as an array of shape (*dims, n)"""
    return np.stack(np.indices(tuple(dims), dtype=dtype), axis=-1)


def normalize_window(window: WindowSpec, dims: Sequence[int]) -> Tuple[int, ...]:
    """Expand a scalar window to per-axis extents and validate against dims"""
    if np.isscalar(window):
        extents = (int(window),) * len(dims)
    else:
        extents = tuple(int(w) for w in window)
    if len(extents) != len(dims):
        raise InvalidWindowError(f"Window {extents} does not match grid dimensionality {len(dims)}")
    if any(w < 1 for w in extents):
        raise InvalidWindowError(f"Window extents must be >= 1, got {extents}")
    if any(w > d for w, d in zip(extents, dims)):
        raise InvalidWindowError(f"Window {extents} larger than grid {tuple(dims)}")
    return extents


def box_sum(data: np.ndarray, window: Sequence[int], adjoint: bool = False) -> np.ndarray:
    """
    Zero-padded running sums over a window anchored w // 2 points before each
    point. With adjoint=True the window is mirrored, giving the transpose
    operator needed for back-propagation through the sums.
    """
    kernel = np.ones(tuple(window), dtype=data.dtype)
    origin = [(w - 1 - 2 * (w // 2)) if adjoint else 0 for w in window]
    return ndimage.correlate(data, kernel, mode='constant', cval=0.0, origin=origin)


def local_sums(img: Image, window: WindowSpec) -> Image:
    """
    Box-filter sums over the window centered at each point.

    Even extents cover extent/2 points before and extent/2 - 1 after the point;
    points outside the grid contribute zero.
    """
    extents = normalize_window(window, img.dims)
    return Image(box_sum(img.data, extents))


def default_window(ndim: int, window_2d: int, window_3d: int) -> int:
    """Window extent used when none is configured"""
    return window_3d if ndim == 3 else window_2d
