"""
Evaluation Service - Overlap and similarity metrics, label propagation,
atlas selection, registration-based segmentation and dense tracking.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import EVALUATION, REGISTRATION
from core.errors import EmptyRegionError, InvalidArgumentError
from core.grid import default_window, grid_points
from core.loss import local_correlation_map, mse, nlcc_loss, smoothness_loss
from core.models import DisplacementField, Image, LabelMap, Mask, require_same_dims
from core.optim import TrainSpec
from core.prep import value_range_mask
from core.regnet import NetConfig
from core.warp import warp
from services.registration_service import MultiScaleResult, RegistrationService, ScaleSchedule

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ['pair', 'masked_mse', 'masked_nlcc', 'smoothness', 'folding_fraction']


@dataclass
class SegmentationResult:
    """Outcome of single-atlas registration-based segmentation"""
    atlas_index: int
    labels: LabelMap
    registration: MultiScaleResult
    dice: Dict[int, float] = field(default_factory=dict)

    @property
    def mean_dice(self) -> Optional[float]:
        return float(np.mean(list(self.dice.values()))) if self.dice else None


@dataclass
class TrackingResult:
    """Fields for every consecutive frame pair and their per-pair metrics"""
    fields: List[DisplacementField]
    metrics: pd.DataFrame
    traces: List[pd.DataFrame] = field(default_factory=list)


class EvaluationService:
    """Service for scoring registrations and running the evaluation flows."""

    @staticmethod
    def dice(pred: LabelMap, truth: LabelMap, class_id: int) -> float:
        """
        Dice overlap 2TP / (2TP + FN + FP) for one class.

        Returns 1.0 when the class is absent from both maps.
        """
        require_same_dims(pred.dims, truth.dims, "predicted and true label maps")
        predicted = pred.class_mask(class_id)
        actual = truth.class_mask(class_id)
        tp = int(np.count_nonzero(predicted & actual))
        fp = int(np.count_nonzero(predicted & ~actual))
        fn = int(np.count_nonzero(~predicted & actual))
        denominator = 2 * tp + fn + fp
        if denominator == 0:
            return 1.0
        return 2.0 * tp / denominator

    @staticmethod
    def dice_per_class(pred: LabelMap, truth: LabelMap, classes: Optional[Sequence[int]] = None) -> Dict[int, float]:
        if classes is None:
            classes = EVALUATION['FOREGROUND_CLASSES']
        return {int(c): EvaluationService.dice(pred, truth, int(c)) for c in classes}

    @staticmethod
    def warp_labels(labels: LabelMap, displacement: DisplacementField) -> LabelMap:
        """
        Nearest-neighbor label lookup at p + u(p), clamped to the border.

        Args:
            labels: Label map on the moving grid
            displacement: Field whose grid defines the output

        Returns:
            LabelMap on the field grid with the same class count
        """
        if displacement.ndim != len(labels.dims):
            raise InvalidArgumentError(
                f"Field dimensionality {displacement.ndim} does not match labels {labels.dims}"
            )
        positions = grid_points(displacement.dims, dtype=np.float64) + displacement.vectors
        index = tuple(
            np.clip(np.floor(positions[..., a] + 0.5).astype(np.intp), 0, extent - 1)
            for a, extent in enumerate(labels.dims)
        )
        return LabelMap(labels.labels[index], num_classes=labels.num_classes)

    @staticmethod
    def _similarity_window(dims: Sequence[int], window=None) -> Tuple[int, ...]:
        if window is None:
            window = default_window(len(dims), REGISTRATION['WINDOW_2D'], REGISTRATION['WINDOW_3D'])
        extents = (int(window),) * len(dims) if np.isscalar(window) else tuple(int(w) for w in window)
        return tuple(min(w, d) for w, d in zip(extents, dims))

    @staticmethod
    def select_atlas(test: Image, atlases: Sequence[Image], window=None) -> int:
        """
        Index of the atlas most similar to the test image by local NLCC.

        Ties resolve to the lowest index.
        """
        if not atlases:
            raise InvalidArgumentError("Atlas selection needs at least one atlas")
        extents = EvaluationService._similarity_window(test.dims, window)
        scores = []
        for atlas in atlases:
            require_same_dims(test.dims, atlas.dims, "test image and atlas")
            loss, _ = nlcc_loss(test, atlas, extents)
            scores.append(loss)
        index = int(np.argmin(scores))
        logger.info(f"Selected atlas {index} of {len(atlases)} (NLCC loss {scores[index]:.6f})")
        return index

    @staticmethod
    def masked_nlcc_metric(
        fixed: Image,
        warped: Image,
        mask: Mask,
        radius: int = EVALUATION['NLCC_RADIUS']
    ) -> float:
        """
        Mean over the mask of the local normalized cross-correlation in a
        square window of extent 2 * radius + 1 (capped to the grid).
        """
        require_same_dims(fixed.dims, mask.dims, "image and mask")
        if mask.count == 0:
            raise EmptyRegionError("NLCC metric mask selects no points")
        if radius < 0:
            raise InvalidArgumentError(f"NLCC radius must be >= 0, got {radius}")
        window = tuple(min(2 * radius + 1, d) for d in fixed.dims)
        correlation = local_correlation_map(fixed, warped, window, EVALUATION['NLCC_EPS'])
        return float(np.mean(correlation[mask.flags]))

    @staticmethod
    def endpoint_error(
        est: DisplacementField,
        truth: DisplacementField,
        mask: Optional[Mask] = None
    ) -> Tuple[float, float, float]:
        """
        Euclidean endpoint error summary.

        Returns:
            Tuple of (mean, median, max) in pixels
        """
        require_same_dims(est.dims, truth.dims, "estimated and true fields")
        errors = np.sqrt(np.sum((est.vectors - truth.vectors) ** 2, axis=-1))
        if mask is not None:
            require_same_dims(est.dims, mask.dims, "field and mask")
            if mask.count == 0:
                raise EmptyRegionError("Endpoint error mask selects no points")
            errors = errors[mask.flags]
        return float(np.mean(errors)), float(np.median(errors)), float(np.max(errors))

    @staticmethod
    def jacobian_determinant(displacement: DisplacementField) -> np.ndarray:
        """Determinant of d(phi)/dp = I + du/dp by central differences"""
        if any(extent < 2 for extent in displacement.dims):
            raise InvalidArgumentError(f"Jacobian needs every extent >= 2, got {displacement.dims}")
        n = displacement.ndim
        jacobian = np.empty(displacement.dims + (n, n), dtype=np.float64)
        for component in range(n):
            partials = np.gradient(displacement.vectors[..., component], axis=tuple(range(n)))
            if n == 1:
                partials = [partials]
            for axis in range(n):
                jacobian[..., component, axis] = partials[axis] + (1.0 if component == axis else 0.0)
        return np.linalg.det(jacobian)

    @staticmethod
    def folding_fraction(displacement: DisplacementField) -> float:
        """Fraction of grid points where the Jacobian determinant is <= 0"""
        return float(np.mean(EvaluationService.jacobian_determinant(displacement) <= 0))

    @staticmethod
    def evaluation_mask(fixed: Image, mask: Optional[Mask] = None) -> Mask:
        """Given mask, else the value-range mask of the fixed image, else all points"""
        if mask is not None:
            require_same_dims(fixed.dims, mask.dims, "image and mask")
            return mask
        region = value_range_mask(fixed)
        if region.count == 0:
            logger.warning("Value-range mask is empty, evaluating over the whole grid")
            return Mask(np.ones(fixed.dims, dtype=bool))
        return region

    @staticmethod
    def evaluate_registration(
        moving: Image,
        fixed: Image,
        displacement: DisplacementField,
        mask: Optional[Mask] = None
    ) -> Dict[str, float]:
        """
        Masked MSE, masked NLCC, smoothness and folding fraction of one result.
        """
        region = EvaluationService.evaluation_mask(fixed, mask)
        warped = warp(moving, displacement)
        smoothness, _ = smoothness_loss(displacement)
        return {
            'masked_mse': mse(fixed, warped, region),
            'masked_nlcc': EvaluationService.masked_nlcc_metric(fixed, warped, region),
            'smoothness': smoothness,
            'folding_fraction': EvaluationService.folding_fraction(displacement),
        }

    @staticmethod
    def segment(
        test: Image,
        atlases: Sequence[Image],
        atlas_labels: Sequence[LabelMap],
        schedule: ScaleSchedule,
        spec: TrainSpec,
        truth: Optional[LabelMap] = None,
        classes: Optional[Sequence[int]] = None,
        init_params=None,
        net_config: Optional[NetConfig] = None
    ) -> SegmentationResult:
        """
        Registration-based segmentation with the most similar atlas.

        The chosen atlas is the moving image, the test image is fixed, and the
        atlas labels are propagated through the final field.

        Args:
            test: Image to segment
            atlases: Candidate labeled images
            atlas_labels: Label map per atlas
            schedule: Scale schedule for registration
            spec: Objective and iteration settings
            truth: Optional ground-truth labels for Dice
            classes: Classes scored with Dice (default foreground classes)

        Returns:
            SegmentationResult
        """
        if len(atlases) != len(atlas_labels):
            raise InvalidArgumentError("Every atlas needs a label map")
        index = EvaluationService.select_atlas(test, atlases)
        result = RegistrationService.register_multiscale(
            atlases[index], test, schedule, spec, init_params=init_params, net_config=net_config
        )
        labels = EvaluationService.warp_labels(atlas_labels[index], result.final_field)
        scores = {}
        if truth is not None:
            scores = EvaluationService.dice_per_class(labels, truth, classes)
            logger.info(f"Segmentation Dice: {scores}")
        return SegmentationResult(atlas_index=index, labels=labels, registration=result, dice=scores)

    @staticmethod
    def track_sequence(
        frames: Sequence[Image],
        schedule: ScaleSchedule,
        spec: TrainSpec,
        mask: Optional[Mask] = None,
        shared: bool = True,
        init_params=None,
        net_config: Optional[NetConfig] = None
    ) -> TrackingResult:
        """
        Dense tracking: the previous frame is moving, the current frame fixed.

        Args:
            frames: At least two frames of equal extent
            schedule: Scale schedule
            spec: Objective and iteration settings
            mask: Evaluation region (default value-range mask per fixed frame)
            shared: Tune one predictor per scale round-robin over the whole
                sequence within one step budget; False registers every pair
                separately with its own budget

        Returns:
            TrackingResult with one field per consecutive pair
        """
        if len(frames) < 2:
            raise InvalidArgumentError("Tracking needs at least two frames")
        traces = []
        if shared:
            sequence = RegistrationService.register_sequence(
                frames, schedule, spec, init_params=init_params, net_config=net_config
            )
            fields = sequence.fields
            traces.append(sequence.combined_trace())
        else:
            fields = []
            for index, (moving, fixed) in enumerate(zip(frames[:-1], frames[1:])):
                logger.info(f"Tracking pair {index + 1}/{len(frames) - 1}")
                result = RegistrationService.register_multiscale(
                    moving, fixed, schedule, spec, init_params=init_params, net_config=net_config
                )
                fields.append(result.final_field)
                traces.append(result.combined_trace())

        records = []
        for index, (moving, fixed, displacement) in enumerate(zip(frames[:-1], frames[1:], fields)):
            metrics = EvaluationService.evaluate_registration(moving, fixed, displacement, mask)
            records.append({'pair': index, **metrics})
        return TrackingResult(fields=fields, metrics=pd.DataFrame(records, columns=METRIC_COLUMNS), traces=traces)
