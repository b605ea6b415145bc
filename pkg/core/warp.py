"""
Spatial transformer: warps a moving image by a displacement field and
back-propagates gradients to the field.
"""
import logging

import numpy as np

from core.errors import InvalidFieldError, ShapeMismatchError
from core.grid import grid_points, interpolate, interpolate_gradient
from core.models import DisplacementField, Image

logger = logging.getLogger(__name__)


def _sampling_coords(moving: Image, field: DisplacementField):
    if field.ndim != moving.ndim:
        raise ShapeMismatchError(
            f"Field dimensionality {field.ndim} does not match image dimensionality {moving.ndim}"
        )
    if not np.all(np.isfinite(field.vectors)):
        raise InvalidFieldError("Cannot warp with a non-finite field")
    positions = grid_points(field.dims, dtype=field.dtype) + field.vectors
    return [positions[..., a] for a in range(field.ndim)]


def warp(moving: Image, field: DisplacementField) -> Image:
    """
    Sample the moving image at p + u(p) for every point p of the field grid.

    Args:
        moving: Image to deform (may differ in extent from the field grid)
        field: Displacement field defining the output grid

    Returns:
        Warped image on the field grid
    """
    if field.dims == moving.dims and field.is_identity:
        return moving.copy()
    coords = _sampling_coords(moving, field)
    return Image(interpolate(moving.data, coords))


def warp_backward(moving: Image, field: DisplacementField, upstream: Image) -> np.ndarray:
    """
    Gradient of a loss w.r.t. the field given its gradient w.r.t. the warped image.

    Args:
        moving: Image that was warped
        field: Field used for the forward warp
        upstream: dLoss/dWarped on the field grid

    Returns:
        Array of shape (*dims, n) holding dLoss/du
    """
    upstream_data = upstream.data if isinstance(upstream, Image) else np.asarray(upstream)
    if tuple(upstream_data.shape) != field.dims:
        raise ShapeMismatchError(f"Upstream gradient {upstream_data.shape} does not match field grid {field.dims}")
    coords = _sampling_coords(moving, field)
    partials = interpolate_gradient(moving.data, coords)
    return np.stack([upstream_data * partial for partial in partials], axis=-1)
