"""
Registration objectives: negative normalized local cross-correlation,
displacement smoothness and evaluation error measures, with analytic
gradients for the training losses.
"""
import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, Optional, Tuple

import numpy as np

from config import REGISTRATION
from core.errors import EmptyRegionError, InvalidArgumentError, InvalidFieldError
from core.grid import WindowSpec, box_sum, normalize_window
from core.models import DisplacementField, Image, Mask, require_same_dims
from core.warp import warp, warp_backward

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossReport:
    """Reconstruction and weighted smoothness terms of one evaluation"""
    reconstruction: float
    smoothness: float
    total: float
    lam: float

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _window_statistics(fixed: np.ndarray, warped: np.ndarray, window, eps: float):
    """Windowed sums shared by the loss and the evaluation metric"""
    count = box_sum(np.ones_like(fixed), window)
    fixed_sum = box_sum(fixed, window)
    warped_sum = box_sum(warped, window)
    fixed_mean = fixed_sum / count
    warped_mean = warped_sum / count
    cross = box_sum(fixed * warped, window) - fixed_sum * warped_mean
    fixed_var = np.maximum(box_sum(fixed * fixed, window) - fixed_sum * fixed_mean, 0.0)
    warped_var = np.maximum(box_sum(warped * warped, window) - warped_sum * warped_mean, 0.0)
    return {
        'fixed_mean': fixed_mean,
        'warped_mean': warped_mean,
        'cross': cross,
        'fixed_var': fixed_var,
        'warped_var': warped_var,
        'denominator': fixed_var * warped_var + eps,
    }


def local_correlation_map(fixed: Image, warped: Image, window: WindowSpec, eps: float) -> np.ndarray:
    """Signed local correlation cross / sqrt(var_I * var_J + eps) at every point"""
    require_same_dims(fixed.dims, warped.dims, "fixed and warped images")
    extents = normalize_window(window, fixed.dims)
    stats = _window_statistics(fixed.data, warped.data, extents, eps)
    return stats['cross'] / np.sqrt(stats['denominator'])


def nlcc_loss(
    fixed: Image,
    warped: Image,
    window: WindowSpec,
    eps: float = REGISTRATION['NLCC_EPS']
) -> Tuple[float, np.ndarray]:
    """
    Negative normalized local cross-correlation and its gradient.

    Local means and sums cover the in-grid part of each window.

    Args:
        fixed: Fixed image
        warped: Warped moving image
        window: Window extents (scalar or per axis)
        eps: Denominator guard

    Returns:
        Tuple of (loss in [-1, 0], dLoss/dWarped array)
    """
    require_same_dims(fixed.dims, warped.dims, "fixed and warped images")
    if not eps > 0:
        raise InvalidArgumentError(f"NLCC eps must be positive, got {eps}")
    extents = normalize_window(window, fixed.dims)
    stats = _window_statistics(fixed.data, warped.data, extents, eps)
    cross = stats['cross']
    denominator = stats['denominator']
    correlation = cross * cross / denominator
    size = correlation.size
    loss = -float(np.sum(correlation)) / size

    # d(correlation)/d(cross) and d(correlation)/d(warped_var) per window
    alpha = 2.0 * cross / denominator
    beta = -cross * cross * stats['fixed_var'] / (denominator * denominator)
    gradient = (
        fixed.data * box_sum(alpha, extents, adjoint=True)
        - box_sum(alpha * stats['fixed_mean'], extents, adjoint=True)
        + 2.0 * warped.data * box_sum(beta, extents, adjoint=True)
        - 2.0 * box_sum(beta * stats['warped_mean'], extents, adjoint=True)
    )
    return loss, -gradient / size


def smoothness_loss(field: DisplacementField, reduction: str = "sum") -> Tuple[float, np.ndarray]:
    """
    Sum of squared forward differences of every component along every axis.

    Args:
        field: Displacement field, every extent >= 2
        reduction: "sum" or "mean" (sum divided by grid points times components)

    Returns:
        Tuple of (loss, dLoss/du array of shape (*dims, n))
    """
    if any(extent < 2 for extent in field.dims):
        raise InvalidFieldError(f"Smoothness needs every extent >= 2, got {field.dims}")
    if reduction not in ("sum", "mean"):
        raise InvalidArgumentError(f"Unknown smoothness reduction '{reduction}'")
    vectors = field.vectors
    gradient = np.zeros_like(vectors)
    total = 0.0
    for axis in range(field.ndim):
        diff = np.diff(vectors, axis=axis)
        total += float(np.sum(diff * diff))
        head = [slice(None)] * vectors.ndim
        tail = [slice(None)] * vectors.ndim
        head[axis] = slice(None, -1)
        tail[axis] = slice(1, None)
        gradient[tuple(head)] -= 2.0 * diff
        gradient[tuple(tail)] += 2.0 * diff
    if reduction == "mean":
        norm = float(vectors.size)
        return total / norm, gradient / norm
    return total, gradient


def total_loss(
    moving: Image,
    fixed: Image,
    field: DisplacementField,
    lam: float,
    window: WindowSpec,
    reduction: str = "sum",
    eps: float = REGISTRATION['NLCC_EPS']
) -> Tuple[LossReport, np.ndarray]:
    """
    Evaluate NLCC of the warped moving image plus lam times smoothness, and the gradient w.r.t. the field.

    Returns:
        Tuple of (LossReport, dLoss/du array)
    """
    warped = warp(moving, field)
    reconstruction, warped_gradient = nlcc_loss(fixed, warped, window, eps)
    smoothness, smooth_gradient = smoothness_loss(field, reduction)
    field_gradient = warp_backward(moving, field, Image(warped_gradient)) + lam * smooth_gradient
    report = LossReport(
        reconstruction=reconstruction,
        smoothness=smoothness,
        total=reconstruction + lam * smoothness,
        lam=float(lam),
    )
    return report, field_gradient


def mse(fixed: Image, warped: Image, mask: Optional[Mask] = None) -> float:
    """Mean squared difference over the masked points (all points when no mask)"""
    require_same_dims(fixed.dims, warped.dims, "fixed and warped images")
    squared = (fixed.data - warped.data) ** 2
    if mask is None:
        return float(np.mean(squared))
    require_same_dims(fixed.dims, mask.dims, "image and mask")
    if mask.count == 0:
        raise EmptyRegionError("MSE mask selects no points")
    return float(np.mean(squared[mask.flags]))
