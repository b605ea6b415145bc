"""
Registration Service - Coarse-to-fine registration: per-scale inputs,
per-scale test-time training, residual field aggregation and weight hand-off
between consecutive scales.
"""

import logging
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from config import SCHEDULES
from core.errors import ConfigError, OptimizationAbortError, ShapeMismatchError
from core.grid import downsample, downsampled_dims, grid_points, sample_field_at, upsample_field
from core.models import DisplacementField, Image, require_same_dims
from core.optim import TrainSpec
from core.regnet import NetConfig, NetParams, init_params, predict_field
from core.warp import warp
from services.training_service import TrainingService

logger = logging.getLogger(__name__)

InitParams = Optional[Union[NetParams, Sequence[Optional[NetParams]]]]


@dataclass(frozen=True)
class ScaleSchedule:
    """Coarse-to-fine scale factors {S, 2S, ..., 1/2, 1} with per-scale step counts"""
    scales: Tuple[float, ...]
    steps: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, 'scales', tuple(float(s) for s in self.scales))
        if self.steps is not None:
            object.__setattr__(self, 'steps', tuple(int(n) for n in self.steps))
        self.validate()

    def validate(self) -> None:
        if not self.scales:
            raise ConfigError("Scale schedule is empty")
        if self.scales[-1] != 1.0:
            raise ConfigError(f"Scale schedule must end at 1, got {self.scales}")
        for scale in self.scales:
            exponent = np.log2(scale) if scale > 0 else np.nan
            if not (0 < scale <= 1) or not np.isclose(exponent, round(exponent)):
                raise ConfigError(f"Scales must be powers of two in (0, 1], got {scale}")
        for coarse, fine in zip(self.scales[:-1], self.scales[1:]):
            if fine != 2 * coarse:
                raise ConfigError(f"Each scale must double its predecessor, got {coarse} then {fine}")
        if self.steps is not None:
            if len(self.steps) != len(self.scales):
                raise ConfigError("Per-scale step counts must match the number of scales")
            if any(n < 1 for n in self.steps):
                raise ConfigError("Per-scale step counts must be >= 1")

    @classmethod
    def from_profile(cls, profile: str, steps: Optional[Sequence[int]] = None) -> 'ScaleSchedule':
        """Named schedule: 'hippo2' = {1/2, 1}, 'echo4' = {1/8, 1/4, 1/2, 1}"""
        if profile not in SCHEDULES or profile == 'DEFAULT_PROFILE':
            raise ConfigError(f"Unknown schedule profile '{profile}'")
        return cls(tuple(SCHEDULES[profile]), tuple(steps) if steps is not None else None)

    @classmethod
    def parse(cls, text: str, steps: Optional[Sequence[int]] = None) -> 'ScaleSchedule':
        """Parse a comma separated list such as '1/8,1/4,1/2,1'"""
        try:
            scales = tuple(float(Fraction(part.strip())) for part in text.split(',') if part.strip())
        except (ValueError, ZeroDivisionError) as e:
            raise ConfigError(f"Cannot parse scale list '{text}': {str(e)}")
        return cls(scales, tuple(steps) if steps is not None else None)

    @classmethod
    def equal_budget(cls, scales: Sequence[float], total_steps: int) -> 'ScaleSchedule':
        """Split a total step budget evenly, remainder going to the finest scales"""
        count = len(scales)
        base, extra = divmod(int(total_steps), count)
        steps = [base + (1 if i >= count - extra else 0) for i in range(count)]
        return cls(tuple(scales), tuple(steps))

    def steps_for(self, index: int, spec: TrainSpec) -> int:
        return self.steps[index] if self.steps is not None else int(spec.steps)

    def labels(self) -> List[str]:
        return [str(Fraction(s).limit_denominator()) for s in self.scales]


def stack_traces(scales: Sequence[float], traces: Sequence[pd.DataFrame]) -> pd.DataFrame:
    frames = []
    for scale, trace in zip(scales, traces):
        frame = trace.copy()
        frame.insert(0, 'scale', scale)
        frames.append(frame)
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()


@dataclass
class MultiScaleResult:
    """Per-scale fields (all on the full grid), parameters and loss traces"""
    scales: Tuple[float, ...]
    per_scale_fields: List[DisplacementField] = field(default_factory=list)
    per_scale_residuals: List[DisplacementField] = field(default_factory=list)
    per_scale_params: List[NetParams] = field(default_factory=list)
    per_scale_traces: List[pd.DataFrame] = field(default_factory=list)
    per_scale_seconds: List[float] = field(default_factory=list)

    @property
    def final_field(self) -> DisplacementField:
        return self.per_scale_fields[-1]

    def combined_trace(self) -> pd.DataFrame:
        """All per-scale traces stacked with a scale column"""
        return stack_traces(self.scales, self.per_scale_traces)


@dataclass
class SequenceResult:
    """Fields per consecutive frame pair from sequence-level registration"""
    scales: Tuple[float, ...]
    fields: List[DisplacementField] = field(default_factory=list)
    per_scale_params: List[NetParams] = field(default_factory=list)
    per_scale_traces: List[pd.DataFrame] = field(default_factory=list)

    def combined_trace(self) -> pd.DataFrame:
        return stack_traces(self.scales, self.per_scale_traces)


class RegistrationService:
    """Service for multi-scale residual registration."""

    @staticmethod
    def prepare_scale_inputs(
        moving: Image,
        fixed: Image,
        prev_field: DisplacementField,
        s: float
    ) -> Tuple[Image, Image]:
        """
        Warp the original moving image by the previous scale's field at full
        resolution, then downsample both images to scale s.

        Returns:
            Tuple of (M^s, I^s)
        """
        require_same_dims(moving.dims, fixed.dims, "moving and fixed images")
        require_same_dims(prev_field.dims, fixed.dims, "previous field and images")
        reconstructed = warp(moving, prev_field)
        return downsample(reconstructed, s), downsample(fixed, s)

    @staticmethod
    def aggregate_field(
        prev_field: DisplacementField,
        residual: DisplacementField,
        s: float
    ) -> DisplacementField:
        """
        Compose the scale-s residual with the previous full-resolution field.
        The residual is rescaled by 1/s, upsampled to the full grid, sampled at
        p + prev(p) and added to prev(p).

        Args:
            prev_field: Field of the previous scale on the full grid
            residual: Residual field predicted at scale s
            s: Scale factor of the residual

        Returns:
            Composed field on the full grid
        """
        expected = downsampled_dims(prev_field.dims, s)
        if residual.dims != expected:
            raise ShapeMismatchError(
                f"Residual at scale {s} should have extents {expected}, got {residual.dims}"
            )
        if residual.is_identity:
            return DisplacementField(prev_field.vectors.copy(), scale=s)
        factor = 1.0 / s
        scaled = DisplacementField(residual.vectors * factor, scale=s)
        upsampled = upsample_field(scaled, factor, out_dims=prev_field.dims)
        points = grid_points(prev_field.dims, dtype=upsampled.dtype) + prev_field.vectors
        sampled = sample_field_at(upsampled, points)
        return DisplacementField(prev_field.vectors + sampled, scale=s)

    @staticmethod
    def _starting_params(
        index: int,
        init: InitParams,
        handed_off: Optional[NetParams],
        config: NetConfig,
        seed: int
    ) -> NetParams:
        if isinstance(init, NetParams):
            if index == 0:
                return init
        elif init is not None and index < len(init) and init[index] is not None:
            return init[index]
        if handed_off is not None:
            return handed_off
        return init_params(config, seed)

    @staticmethod
    def _resolve_config(fixed: Image, init: InitParams, net_config: Optional[NetConfig]) -> NetConfig:
        if net_config is not None:
            return net_config
        if isinstance(init, NetParams):
            return init.config
        if init is not None:
            for params in init:
                if params is not None:
                    return params.config
        return NetConfig(ndim=fixed.ndim)

    @staticmethod
    def register_multiscale(
        moving: Image,
        fixed: Image,
        schedule: ScaleSchedule,
        spec: TrainSpec,
        init_params: InitParams = None,
        net_config: Optional[NetConfig] = None
    ) -> MultiScaleResult:
        """
        Coarse-to-fine test-time-trained registration of one pair.

        Each scale fine-tunes parameters starting from the previous scale's
        tuned parameters (fresh, or init_params, at the coarsest scale).

        Args:
            moving: Moving image M
            fixed: Fixed image I
            schedule: Scales and per-scale step budgets
            spec: Objective settings (spec.steps used when schedule has no steps)
            init_params: Warm start for the coarsest scale, or a per-scale list
            net_config: Layout for freshly initialized parameters

        Returns:
            MultiScaleResult with all per-scale fields, params and traces
        """
        require_same_dims(moving.dims, fixed.dims, "moving and fixed images")
        config = RegistrationService._resolve_config(fixed, init_params, net_config)
        result = MultiScaleResult(scales=schedule.scales)
        prev_field = DisplacementField.zeros(fixed.dims, scale=schedule.scales[0] / 2)
        handed_off = None

        for index, s in enumerate(schedule.scales):
            started = time.perf_counter()
            moving_s, fixed_s = RegistrationService.prepare_scale_inputs(moving, fixed, prev_field, s)
            start = RegistrationService._starting_params(index, init_params, handed_off, config, spec.seed)
            steps = schedule.steps_for(index, spec)
            logger.info(f"Scale {s:g} ({index + 1}/{len(schedule.scales)}): grid {fixed_s.dims}, {steps} steps")
            try:
                tuned, residual, trace = TrainingService.test_time_train(
                    start, moving_s, fixed_s, spec.with_steps(steps), scale=s
                )
            except OptimizationAbortError as e:
                logger.error(f"Optimization aborted at scale {s:g}: {str(e)}")
                raise e.with_scale(index) from e
            prev_field = RegistrationService.aggregate_field(prev_field, residual, s)
            handed_off = tuned
            result.per_scale_fields.append(prev_field)
            result.per_scale_residuals.append(residual)
            result.per_scale_params.append(tuned)
            result.per_scale_traces.append(trace)
            result.per_scale_seconds.append(time.perf_counter() - started)

        return result

    @staticmethod
    def infer_multiscale(
        moving: Image,
        fixed: Image,
        schedule: ScaleSchedule,
        per_scale_params: Sequence[NetParams]
    ) -> MultiScaleResult:
        """
        Feed-forward multi-scale registration with given parameters and no
        test-time training.
        """
        if len(per_scale_params) != len(schedule.scales):
            raise ConfigError("Feed-forward inference needs one parameter set per scale")
        result = MultiScaleResult(scales=schedule.scales)
        prev_field = DisplacementField.zeros(fixed.dims, scale=schedule.scales[0] / 2)
        for s, params in zip(schedule.scales, per_scale_params):
            started = time.perf_counter()
            moving_s, fixed_s = RegistrationService.prepare_scale_inputs(moving, fixed, prev_field, s)
            predicted, _ = predict_field(params, fixed_s, moving_s)
            residual = DisplacementField(predicted.vectors, scale=s)
            prev_field = RegistrationService.aggregate_field(prev_field, residual, s)
            result.per_scale_fields.append(prev_field)
            result.per_scale_residuals.append(residual)
            result.per_scale_params.append(params)
            result.per_scale_traces.append(TrainingService.trace_frame([]))
            result.per_scale_seconds.append(time.perf_counter() - started)
        return result

    @staticmethod
    def register_sequence(
        frames: Sequence[Image],
        schedule: ScaleSchedule,
        spec: TrainSpec,
        init_params: InitParams = None,
        net_config: Optional[NetConfig] = None
    ) -> SequenceResult:
        """
        Multi-scale registration of every consecutive frame pair, tuning one
        predictor per scale round-robin over the whole sequence.

        Returns:
            SequenceResult with one full-resolution field per pair
        """
        if len(frames) < 2:
            raise ConfigError("Sequence registration needs at least two frames")
        for frame in frames[1:]:
            require_same_dims(frames[0].dims, frame.dims, "sequence frames")
        config = RegistrationService._resolve_config(frames[0], init_params, net_config)
        pairs = list(zip(frames[:-1], frames[1:]))
        prev_fields = [DisplacementField.zeros(frames[0].dims, scale=schedule.scales[0] / 2) for _ in pairs]
        result = SequenceResult(scales=schedule.scales)
        handed_off = None

        for index, s in enumerate(schedule.scales):
            scaled_pairs = [
                RegistrationService.prepare_scale_inputs(moving, fixed, prev, s)
                for (moving, fixed), prev in zip(pairs, prev_fields)
            ]
            start = RegistrationService._starting_params(index, init_params, handed_off, config, spec.seed)
            steps = schedule.steps_for(index, spec)
            logger.info(f"Sequence scale {s:g}: {len(pairs)} pairs, {steps} steps")
            try:
                tuned, residuals, trace = TrainingService.test_time_train_sequence(
                    start, [], spec.with_steps(steps), scale=s, pairs=scaled_pairs
                )
            except OptimizationAbortError as e:
                raise e.with_scale(index) from e
            prev_fields = [
                RegistrationService.aggregate_field(prev, residual, s)
                for prev, residual in zip(prev_fields, residuals)
            ]
            handed_off = tuned
            result.per_scale_params.append(tuned)
            result.per_scale_traces.append(trace)

        result.fields = prev_fields
        return result
