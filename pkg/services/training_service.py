"""
Training Service - Population training and test-time training of the
displacement predictor with Adam.
"""

import logging
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import REGISTRATION
from core.errors import InvalidArgumentError, OptimizationAbortError
from core.loss import LossReport, total_loss
from core.models import DisplacementField, Image, require_same_dims
from core.optim import AdamState, TrainSpec, adam_step
from core.regnet import NetParams, backward, predict_field

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ['step', 'reconstruction', 'smoothness', 'total']

Pair = Tuple[Image, Image]


class DivergenceGuard:
    """Flags a run whose total loss stays above factor * |initial| for `patience` steps"""

    def __init__(
        self,
        factor: float = REGISTRATION['DIVERGENCE_FACTOR'],
        patience: int = REGISTRATION['DIVERGENCE_PATIENCE']
    ):
        self.factor = factor
        self.patience = patience
        self.initial: Optional[float] = None
        self.consecutive = 0

    def update(self, total: float) -> bool:
        """Record one loss value; returns True once the run counts as diverged"""
        if self.initial is None:
            self.initial = total
            return False
        threshold = self.factor * abs(self.initial)
        self.consecutive = self.consecutive + 1 if total > threshold else 0
        return self.consecutive >= self.patience


class TrainingService:
    """Service for optimizing predictor parameters on image pairs."""

    @staticmethod
    def trace_frame(records: List[dict]) -> pd.DataFrame:
        """Loss trace as a DataFrame with columns step, reconstruction, smoothness, total"""
        return pd.DataFrame(records, columns=TRACE_COLUMNS)

    @staticmethod
    def evaluate_pair(
        params: NetParams,
        moving: Image,
        fixed: Image,
        spec: TrainSpec,
        window: Sequence[int]
    ) -> Tuple[LossReport, DisplacementField, dict]:
        """
        Loss, predicted field and parameter gradients for one pair.

        Returns:
            Tuple of (loss report, predicted field, parameter gradients)
        """
        field, tape = predict_field(params, fixed, moving)
        report, field_grad = total_loss(
            moving, fixed, field, spec.lam, window,
            reduction=spec.smoothness_reduction, eps=spec.nlcc_eps
        )
        if not np.isfinite(report.total):
            return report, field, {}
        grads = backward(params, tape, field_grad)
        return report, field, grads

    @staticmethod
    def _optimize(
        params: NetParams,
        pairs: Sequence[Pair],
        spec: TrainSpec,
        window_for: Callable[[Tuple[int, ...]], Tuple[int, ...]],
        label: str
    ):
        if not pairs:
            raise InvalidArgumentError("At least one image pair is required for training")
        for moving, fixed in pairs:
            require_same_dims(moving.dims, fixed.dims, "moving and fixed images")

        state = AdamState.for_params(params, lr=spec.lr)
        guard = DivergenceGuard()
        rng = np.random.default_rng(spec.seed)
        records = []
        best_params, best_field, best_total = None, None, np.inf
        windows = {}

        for step in range(int(spec.steps)):
            if spec.sampling == 'random':
                index = int(rng.integers(len(pairs)))
            else:
                index = step % len(pairs)
            moving, fixed = pairs[index]
            window = windows.setdefault(fixed.dims, window_for(fixed.dims))

            report, field, grads = TrainingService.evaluate_pair(params, moving, fixed, spec, window)
            if not np.isfinite(report.total):
                raise OptimizationAbortError(
                    f"Non-finite loss during {label}",
                    step=step,
                    diagnostics=report.to_dict()
                )
            records.append({
                'step': step,
                'reconstruction': report.reconstruction,
                'smoothness': report.smoothness,
                'total': report.total,
            })
            if guard.update(report.total):
                raise OptimizationAbortError(
                    f"Loss diverged during {label}: above {guard.factor}x initial magnitude "
                    f"for {guard.patience} consecutive steps",
                    step=step,
                    diagnostics={'initial_total': guard.initial, 'total': report.total}
                )
            if report.total < best_total:
                best_params, best_field, best_total = params, field, report.total
            if spec.log_every and step % spec.log_every == 0:
                logger.debug(
                    f"{label} step {step}: total={report.total:.6f} "
                    f"reconstruction={report.reconstruction:.6f} smoothness={report.smoothness:.6f}"
                )

            params, state = adam_step(params, grads, state)

        trace = TrainingService.trace_frame(records)
        logger.info(
            f"{label} finished {len(records)} steps: first total={records[0]['total']:.6f}, "
            f"min total={trace['total'].min():.6f}"
        )
        return best_params, best_field, trace

    @staticmethod
    def train_population(
        params: NetParams,
        pairs: Sequence[Pair],
        spec: TrainSpec
    ) -> Tuple[NetParams, pd.DataFrame]:
        """
        Train on a set of (moving, fixed) pairs, one pair per iteration.

        Returns the iterate with the lowest recorded total loss, each loss
        being that of the pair sampled at its step.

        Args:
            params: Initial parameters
            pairs: Training pairs
            spec: Objective and iteration settings

        Returns:
            Tuple of (best parameters, loss trace)
        """
        best, _, trace = TrainingService._optimize(
            params, pairs, spec,
            window_for=lambda dims: spec.window_for(dims),
            label="population training"
        )
        return best, trace

    @staticmethod
    def test_time_train(
        params: NetParams,
        moving: Image,
        fixed: Image,
        spec: TrainSpec,
        scale: float = 1.0
    ) -> Tuple[NetParams, DisplacementField, pd.DataFrame]:
        """
        Fine-tune parameters on a single pair with fresh Adam moments.

        Returns the iterate with the lowest recorded total loss together with
        the field it predicted.

        Args:
            params: Pretrained or fresh parameters
            moving: Moving image
            fixed: Fixed image
            spec: Objective and iteration settings
            scale: Pyramid scale of the inputs (shrinks the NLCC window)

        Returns:
            Tuple of (tuned parameters, predicted field, loss trace)
        """
        best_params, best_field, trace = TrainingService._optimize(
            params, [(moving, fixed)], spec,
            window_for=lambda dims: spec.window_for(dims, scale),
            label=f"test-time training (scale {scale:g})"
        )
        field = DisplacementField(best_field.vectors, scale=scale)
        return best_params, field, trace

    @staticmethod
    def test_time_train_sequence(
        params: NetParams,
        frames: Sequence[Image],
        spec: TrainSpec,
        scale: float = 1.0,
        pairs: Optional[Sequence[Pair]] = None
    ) -> Tuple[NetParams, List[DisplacementField], pd.DataFrame]:
        """
        Fine-tune one predictor round-robin over consecutive frame pairs
        (previous frame moving, current frame fixed) within spec.steps.

        Args:
            params: Pretrained or fresh parameters
            frames: Frame sequence, at least two frames
            spec: Objective and iteration settings
            scale: Pyramid scale of the frames
            pairs: Explicit (moving, fixed) pairs overriding the consecutive pairing

        Returns:
            Tuple of (best parameters, one field per pair from them, loss trace)
        """
        if pairs is None:
            if len(frames) < 2:
                raise InvalidArgumentError("A sequence needs at least two frames")
            pairs = list(zip(frames[:-1], frames[1:]))
        best, _, trace = TrainingService._optimize(
            params, pairs, spec,
            window_for=lambda dims: spec.window_for(dims, scale),
            label=f"sequence test-time training (scale {scale:g})"
        )
        fields = []
        for moving, fixed in pairs:
            field, _ = predict_field(best, fixed, moving)
            fields.append(DisplacementField(field.vectors, scale=scale))
        return best, fields, trace
