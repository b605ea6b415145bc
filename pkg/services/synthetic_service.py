"""
Synthetic Service - Seeded deformation cases with ground-truth fields and the
benchmark comparing scale schedules on them, stage by stage.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import ndimage

from config import EVALUATION, SYNTHETIC
from core.errors import InvalidArgumentError
from core.models import DisplacementField, Image, LabelMap
from core.optim import TrainSpec
from core.regnet import NetConfig, NetParams, init_params
from core.warp import warp
from services.evaluation_service import EvaluationService
from services.registration_service import RegistrationService, ScaleSchedule
from services.training_service import TrainingService

logger = logging.getLogger(__name__)

BENCHMARK_COLUMNS = [
    'seed', 'max_disp', 'method', 'scales', 'stage', 'final', 'seconds', 'ee_mean', 'ee_median', 'ee_max',
    'masked_mse', 'masked_nlcc', 'folding_fraction', 'dice_1', 'dice_2',
]
SUMMARY_EXCLUDED = ('seed', 'max_disp', 'method', 'scales', 'stage', 'final')


@dataclass
class SyntheticCase:
    """Base image, ground-truth field and the base warped by it"""
    base: Image
    field: DisplacementField
    warped: Image
    seed: int
    max_disp: float
    smoothness: float
    texture_smoothness: float
    labels: Optional[LabelMap] = None
    warped_labels: Optional[LabelMap] = None

    @property
    def moving(self) -> Image:
        return self.base

    @property
    def fixed(self) -> Image:
        return self.warped


@dataclass
class SyntheticSequence:
    """Frames where frame k+1 is frame k warped by fields[k]"""
    frames: List[Image]
    fields: List[DisplacementField] = field(default_factory=list)
    seed: int = 0


def _smooth_noise(rng: np.random.Generator, dims: Tuple[int, ...], sigma: float) -> np.ndarray:
    noise = rng.standard_normal(dims)
    if sigma <= 0:
        return noise
    return ndimage.gaussian_filter(noise, sigma=sigma, mode='reflect', truncate=SYNTHETIC['GAUSSIAN_TRUNCATE'])


def _to_unit_range(data: np.ndarray) -> np.ndarray:
    low, high = float(data.min()), float(data.max())
    if high <= low:
        return np.zeros_like(data)
    return (data - low) / (high - low)


def _phantom_labels(rng: np.random.Generator, dims: Tuple[int, ...]) -> np.ndarray:
    """Nested ellipsoids: class 1 outer shell, class 2 core, jittered center"""
    extents = np.asarray(dims, dtype=np.float64)
    center = extents / 2.0 + rng.uniform(-0.05, 0.05, size=len(dims)) * extents
    outer = extents * rng.uniform(0.25, 0.32, size=len(dims))
    inner = outer * 0.55
    coords = np.indices(dims, dtype=np.float64)
    outer_radius = sum(((coords[a] - center[a]) / outer[a]) ** 2 for a in range(len(dims)))
    inner_radius = sum(((coords[a] - center[a]) / inner[a]) ** 2 for a in range(len(dims)))
    labels = np.zeros(dims, dtype=np.int32)
    labels[outer_radius <= 1.0] = 1
    labels[inner_radius <= 1.0] = 2
    return labels


def _random_field(rng: np.random.Generator, dims: Tuple[int, ...], max_disp: float, smoothness: float) -> DisplacementField:
    components = [_smooth_noise(rng, dims, smoothness) for _ in dims]
    vectors = np.stack(components, axis=-1)
    if max_disp == 0:
        return DisplacementField.zeros(dims)
    peak = float(np.max(np.sqrt(np.sum(vectors * vectors, axis=-1))))
    if peak == 0:
        return DisplacementField.zeros(dims)
    return DisplacementField(vectors * (max_disp / peak))


class SyntheticService:
    """Service for generating synthetic registration problems and benchmarks."""

    @staticmethod
    def make_synthetic_case(
        dims: Sequence[int] = tuple(SYNTHETIC['DIMS']),
        max_disp: float = SYNTHETIC['MAX_DISP'],
        smoothness: float = SYNTHETIC['FIELD_SMOOTHNESS'],
        seed: int = 0,
        texture_smoothness: float = SYNTHETIC['TEXTURE_SMOOTHNESS'],
        with_labels: bool = False
    ) -> SyntheticCase:
        """
        Draw a smooth random field and a band-limited texture, then warp.

        Args:
            dims: Grid extents (2D or 3D)
            max_disp: Largest displacement norm in pixels
            smoothness: Gaussian width of the field noise filter
            seed: Generator seed
            texture_smoothness: Gaussian width of the texture filter
            with_labels: Add a two-class ellipsoid phantom to the base image

        Returns:
            SyntheticCase with warped = warp(base, field)
        """
        dims = tuple(int(d) for d in dims)
        if not max_disp >= 0:
            raise InvalidArgumentError(f"Maximum displacement must be >= 0, got {max_disp}")
        rng = np.random.default_rng(seed)
        displacement = _random_field(rng, dims, float(max_disp), smoothness)
        texture = _to_unit_range(_smooth_noise(rng, dims, texture_smoothness))

        labels = None
        warped_labels = None
        if with_labels:
            label_data = _phantom_labels(rng, dims)
            texture = _to_unit_range(0.5 * texture + 0.25 * label_data)
            labels = LabelMap(label_data, num_classes=3)
            warped_labels = EvaluationService.warp_labels(labels, displacement)

        base = Image(texture)
        warped = warp(base, displacement)
        logger.debug(f"Synthetic case seed={seed} dims={dims} max_disp={max_disp}")
        return SyntheticCase(
            base=base,
            field=displacement,
            warped=warped,
            seed=int(seed),
            max_disp=float(max_disp),
            smoothness=float(smoothness),
            texture_smoothness=float(texture_smoothness),
            labels=labels,
            warped_labels=warped_labels,
        )

    @staticmethod
    def make_synthetic_sequence(
        dims: Sequence[int] = tuple(SYNTHETIC['DIMS']),
        frames: int = 3,
        max_disp: float = SYNTHETIC['MAX_DISP'],
        smoothness: float = SYNTHETIC['FIELD_SMOOTHNESS'],
        seed: int = 0
    ) -> SyntheticSequence:
        """Sequence of frames each obtained by warping its predecessor"""
        if frames < 2:
            raise InvalidArgumentError(f"A sequence needs at least two frames, got {frames}")
        first = SyntheticService.make_synthetic_case(dims, max_disp, smoothness, seed)
        images = [first.base, first.warped]
        fields = [first.field]
        rng = np.random.default_rng(seed + 1)
        dims = tuple(int(d) for d in dims)
        for _ in range(frames - 2):
            displacement = _random_field(rng, dims, float(max_disp), smoothness)
            images.append(warp(images[-1], displacement))
            fields.append(displacement)
        return SyntheticSequence(frames=images, fields=fields, seed=int(seed))

    @staticmethod
    def score_case(case: SyntheticCase, estimate: DisplacementField) -> Dict[str, float]:
        """Endpoint error, masked similarity and Dice of one estimate"""
        ee_mean, ee_median, ee_max = EvaluationService.endpoint_error(estimate, case.field)
        metrics = EvaluationService.evaluate_registration(case.moving, case.fixed, estimate)
        row = {
            'ee_mean': ee_mean,
            'ee_median': ee_median,
            'ee_max': ee_max,
            'masked_mse': metrics['masked_mse'],
            'masked_nlcc': metrics['masked_nlcc'],
            'folding_fraction': metrics['folding_fraction'],
        }
        for class_id in EVALUATION['FOREGROUND_CLASSES']:
            row[f'dice_{class_id}'] = np.nan
        if case.labels is not None:
            propagated = EvaluationService.warp_labels(case.labels, estimate)
            for class_id, score in EvaluationService.dice_per_class(propagated, case.warped_labels).items():
                row[f'dice_{class_id}'] = score
        return row

    @staticmethod
    def pretrain(
        spec: TrainSpec,
        cases: int,
        dims: Sequence[int] = tuple(SYNTHETIC['DIMS']),
        max_disp: float = SYNTHETIC['MAX_DISP'],
        smoothness: float = SYNTHETIC['FIELD_SMOOTHNESS'],
        seed: int = 0,
        net_config: Optional[NetConfig] = None
    ) -> Tuple[NetParams, pd.DataFrame]:
        """
        Population-train parameters on synthetic cases disjoint from the
        benchmark cases drawn with the same seed.

        Returns:
            Tuple of (trained parameters, loss trace)
        """
        if cases < 1:
            raise InvalidArgumentError(f"Pretraining needs at least one case, got {cases}")
        dims = tuple(int(d) for d in dims)
        first = int(seed) + SYNTHETIC['PRETRAIN_SEED_OFFSET']
        pairs = []
        for offset in range(int(cases)):
            case = SyntheticService.make_synthetic_case(dims, max_disp, smoothness, first + offset)
            pairs.append((case.moving, case.fixed))
        config = net_config or NetConfig(ndim=len(dims))
        logger.info(f"Pretraining on {cases} synthetic pairs (seeds {first}..{first + cases - 1})")
        return TrainingService.train_population(init_params(config, spec.seed), pairs, spec)

    @staticmethod
    def run_benchmark(
        schedules: Dict[str, ScaleSchedule],
        spec: TrainSpec,
        cases: int = SYNTHETIC['CASES'],
        dims: Sequence[int] = tuple(SYNTHETIC['DIMS']),
        max_disp: float = SYNTHETIC['MAX_DISP'],
        smoothness: float = SYNTHETIC['FIELD_SMOOTHNESS'],
        seed: int = 0,
        with_labels: bool = False,
        net_config: Optional[NetConfig] = None,
        pretrained: Optional[NetParams] = None
    ) -> pd.DataFrame:
        """
        Register every seeded case with every schedule and score every
        intermediate field.

        Args:
            schedules: Schedules keyed by a display name
            spec: Objective settings; per-schedule step budgets come from the schedules
            cases: Number of cases, seeds seed .. seed + cases - 1
            dims: Grid extents
            max_disp: Largest ground-truth displacement
            smoothness: Field smoothness
            seed: First case seed
            with_labels: Score Dice on phantom labels
            net_config: Layout for freshly initialized parameters
            pretrained: Warm start for test-time training; also scored
                feed-forward at full resolution

        Returns:
            DataFrame with one row per (case, method, schedule, stage)
        """
        if cases < 1:
            raise InvalidArgumentError(f"Benchmark needs at least one case, got {cases}")
        if not schedules:
            raise InvalidArgumentError("Benchmark needs at least one schedule")
        rows = []
        for offset in range(int(cases)):
            case_seed = int(seed) + offset
            case = SyntheticService.make_synthetic_case(
                dims, max_disp, smoothness, case_seed, with_labels=with_labels
            )
            runs = []
            if pretrained is not None:
                full = ScaleSchedule((1.0,))
                runs.append(('feedforward', full, RegistrationService.infer_multiscale(
                    case.moving, case.fixed, full, [pretrained]
                )))
            for name, schedule in schedules.items():
                logger.info(f"Benchmark case {offset + 1}/{cases} (seed {case_seed}), schedule {name}")
                runs.append(('ttt', schedule, RegistrationService.register_multiscale(
                    case.moving, case.fixed, schedule, spec,
                    init_params=pretrained, net_config=net_config
                )))
            for method, schedule, result in runs:
                labels = schedule.labels()
                for index, estimate in enumerate(result.per_scale_fields):
                    row = {
                        'seed': case_seed,
                        'max_disp': float(max_disp),
                        'method': method,
                        'scales': ",".join(labels),
                        'stage': labels[index],
                        'final': index == len(labels) - 1,
                        'seconds': float(sum(result.per_scale_seconds[:index + 1])),
                    }
                    row.update(SyntheticService.score_case(case, estimate))
                    rows.append(row)
        report = pd.DataFrame(rows, columns=BENCHMARK_COLUMNS)
        final = report[report['final']]
        logger.info(
            f"Benchmark finished: {len(final)} runs, median endpoint error by schedule "
            f"{final.groupby(['method', 'scales'])['ee_median'].median().to_dict()}"
        )
        return report

    @staticmethod
    def summarize(report: pd.DataFrame) -> pd.DataFrame:
        """Median of every metric per method and schedule over the final fields"""
        keys = [c for c in ('method', 'scales') if c in report.columns]
        if 'final' in report.columns:
            report = report[report['final'].astype(bool)]
        metrics = [c for c in BENCHMARK_COLUMNS if c in report.columns and c not in SUMMARY_EXCLUDED]
        return report.groupby(keys)[metrics].median().reset_index()
