"""
Pipeline Service - Run configuration, mode dispatch and artifact persistence
for the command line.
"""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import pandas as pd

from config import EXIT_CODES, FILES, NETWORK, REGISTRATION, SCHEDULES, SYNTHETIC
from core.errors import ConfigError, OptimizationAbortError, RegistrationError, TensorParseError
from core.grid import downsample
from core.models import DisplacementField, Image, LabelMap, Mask
from core.optim import TrainSpec
from core.prep import normalize_volume
from core.regnet import NetConfig, NetParams, init_params
from core.warp import warp
from services.data_service import DataService
from services.evaluation_service import EvaluationService
from services.registration_service import RegistrationService, ScaleSchedule
from services.synthetic_service import SyntheticService
from services.training_service import TrainingService
from utils.visualizations import (
    build_html_report,
    create_benchmark_chart,
    create_field_magnitude_heatmap,
    create_field_quiver,
    create_image_comparison,
    create_loss_trace_chart,
    create_pair_metrics_chart,
)

logger = logging.getLogger(__name__)

MODES = ('register', 'track', 'segment', 'benchmark', 'train', 'eval')
PACKAGE_VERSION = '1.0.0'


@dataclass
class RunConfig:
    """Everything one command line run needs, with defaults from config.py"""
    mode: str
    moving: Optional[str] = None
    fixed: Optional[str] = None
    frames: List[str] = field(default_factory=list)
    atlas_dir: Optional[str] = None
    labels: Optional[str] = None
    mask: Optional[str] = None
    field_path: Optional[str] = None
    scales: Optional[str] = None
    profile: str = SCHEDULES['DEFAULT_PROFILE']
    steps: int = REGISTRATION['STEPS']
    lam: float = REGISTRATION['LAMBDA']
    lr: float = REGISTRATION['LEARNING_RATE']
    window: Optional[int] = None
    seed: int = REGISTRATION['SEED']
    precision: int = NETWORK['PRECISION']
    out_dir: str = 'runs/latest'
    checkpoint: Optional[str] = None
    cases: int = SYNTHETIC['CASES']
    max_disp: float = SYNTHETIC['MAX_DISP']
    dims: List[int] = field(default_factory=lambda: list(SYNTHETIC['DIMS']))
    normalize: bool = True
    smoothness_reduction: str = REGISTRATION['SMOOTHNESS_REDUCTION']
    per_pair: bool = False
    pretrain_cases: int = SYNTHETIC['PRETRAIN_CASES']

    def validate(self) -> None:
        """Raise ConfigError for an unusable configuration"""
        if self.mode not in MODES:
            raise ConfigError(f"Unknown mode '{self.mode}', expected one of {', '.join(MODES)}")
        required = {
            'register': ['moving', 'fixed'],
            'segment': ['fixed', 'atlas_dir'],
            'eval': ['moving', 'fixed', 'field_path'],
        }.get(self.mode, [])
        missing = [name for name in required if not getattr(self, name)]
        if missing:
            raise ConfigError(f"Mode '{self.mode}' requires --{', --'.join(m.replace('_', '-') for m in missing)}")
        if self.mode == 'track' and len(self.frames) < 2:
            raise ConfigError("Mode 'track' requires at least two --frames")

        paths = [self.moving, self.fixed, self.labels, self.mask, self.field_path] + list(self.frames)
        if self.mode != 'train':
            paths.append(self.checkpoint)
        for path in paths:
            if path and not Path(path).is_file():
                raise ConfigError(f"Input file {path} does not exist")
        if self.atlas_dir and not Path(self.atlas_dir).is_dir():
            raise ConfigError(f"Atlas directory {self.atlas_dir} does not exist")

        if self.precision not in (32, 64):
            raise ConfigError(f"Precision must be 32 or 64, got {self.precision}")
        if self.cases < 1:
            raise ConfigError(f"Case count must be >= 1, got {self.cases}")
        if self.pretrain_cases < 0:
            raise ConfigError(f"Pretraining case count must be >= 0, got {self.pretrain_cases}")
        if self.max_disp < 0:
            raise ConfigError(f"Maximum displacement must be >= 0, got {self.max_disp}")
        if len(self.dims) not in (2, 3) or any(d < 2 for d in self.dims):
            raise ConfigError(f"Synthetic dims must be 2 or 3 extents >= 2, got {self.dims}")
        try:
            self.train_spec()
        except ValueError as e:
            raise ConfigError(str(e))
        self.schedule()

    def schedule(self) -> ScaleSchedule:
        if self.scales:
            return ScaleSchedule.parse(self.scales)
        return ScaleSchedule.from_profile(self.profile)

    def train_spec(self) -> TrainSpec:
        return TrainSpec(
            lam=self.lam, steps=self.steps, window=self.window, seed=self.seed, lr=self.lr,
            smoothness_reduction=self.smoothness_reduction
        )

    def net_config(self, ndim: int) -> NetConfig:
        return NetConfig(ndim=ndim, precision=self.precision)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


class PipelineService:
    """Service running one configured mode and writing its artifacts."""

    @staticmethod
    def run(config: RunConfig) -> int:
        """
        Execute a run and translate failures into exit codes.

        Args:
            config: Run configuration

        Returns:
            Process exit status (0 ok, 2 config, 3 parse, 4 optimization abort)
        """
        out_dir = Path(config.out_dir)
        outputs: List[str] = []
        status, error = EXIT_CODES['OK'], None
        try:
            config.validate()
            out_dir.mkdir(parents=True, exist_ok=True)
            logger.info(f"Running mode '{config.mode}' into {out_dir}")
            handler = MODE_HANDLERS[config.mode]
            outputs = [PipelineService._relative(p, out_dir) for p in handler(config, out_dir)]
        except ConfigError as e:
            logger.error(f"Configuration error: {str(e)}", exc_info=True)
            status, error = EXIT_CODES['CONFIG_ERROR'], str(e)
        except TensorParseError as e:
            logger.error(f"Could not parse input: {str(e)}", exc_info=True)
            status, error = EXIT_CODES['PARSE_ERROR'], str(e)
        except OptimizationAbortError as e:
            logger.error(f"Optimization aborted: {str(e)}", exc_info=True)
            status, error = EXIT_CODES['OPTIMIZATION_ABORT'], str(e)
        except (RegistrationError, FileNotFoundError) as e:
            logger.error(f"Invalid input: {str(e)}", exc_info=True)
            status, error = EXIT_CODES['CONFIG_ERROR'], str(e)

        if out_dir.is_dir():
            DataService.save_manifest(PipelineService.manifest(config, outputs, status, error), out_dir / FILES['MANIFEST_FILE'])
        return status

    @staticmethod
    def _relative(path: Path, out_dir: Path) -> str:
        try:
            return str(path.relative_to(out_dir))
        except ValueError:
            return str(path)

    @staticmethod
    def manifest(config: RunConfig, outputs: List[str], status: int, error: Optional[str]) -> Dict[str, Any]:
        """Resolved configuration plus format versions and produced files"""
        manifest = {
            'package_version': PACKAGE_VERSION,
            'config': config.to_dict(),
            'seed': config.seed,
            'precision': config.precision,
            'formats': {
                'tensor': {'magic': FILES['TENSOR_MAGIC'].decode('ascii'), 'version': FILES['TENSOR_VERSION']},
                'checkpoint': {'magic': FILES['CHECKPOINT_MAGIC'].decode('ascii'), 'version': FILES['CHECKPOINT_VERSION']},
            },
            'outputs': sorted(outputs),
            'exit_status': status,
        }
        try:
            manifest['schedule'] = list(config.schedule().scales)
            manifest['train_spec'] = config.train_spec().to_dict()
        except ValueError:
            pass
        if error is not None:
            manifest['error'] = error
        return manifest

    @staticmethod
    def _load_image(path: str, config: RunConfig) -> Image:
        img = DataService.load_image(path)
        if config.normalize:
            img = normalize_volume(img)
        return img.astype(config.net_config(img.ndim).dtype)

    @staticmethod
    def _load_mask(path: Optional[str]) -> Optional[Mask]:
        if not path:
            return None
        tensor = DataService.load_tensor(path)
        if isinstance(tensor, Mask):
            return tensor
        if isinstance(tensor, Image):
            return Mask(tensor.data > 0.5)
        if isinstance(tensor, LabelMap):
            return Mask(tensor.labels > 0)
        raise ConfigError(f"{path} does not hold a mask")

    @staticmethod
    def _load_labels(path: str) -> LabelMap:
        tensor = DataService.load_tensor(path)
        if not isinstance(tensor, LabelMap):
            raise ConfigError(f"{path} does not hold a label map")
        return tensor

    @staticmethod
    def _warm_start(config: RunConfig) -> Optional[NetParams]:
        return DataService.load_checkpoint(config.checkpoint) if config.checkpoint else None

    @staticmethod
    def _write_report(out_dir: Path, title: str, sections, tables=None) -> Path:
        target = out_dir / FILES['REPORT_FILE']
        target.write_text(build_html_report(title, sections, tables), encoding='utf-8')
        logger.info(f"Wrote report to {target}")
        return target

    @staticmethod
    def run_register(config: RunConfig, out_dir: Path) -> List[Path]:
        moving = PipelineService._load_image(config.moving, config)
        fixed = PipelineService._load_image(config.fixed, config)
        mask = PipelineService._load_mask(config.mask)
        result = RegistrationService.register_multiscale(
            moving, fixed, config.schedule(), config.train_spec(),
            init_params=PipelineService._warm_start(config),
            net_config=config.net_config(fixed.ndim)
        )
        final = result.final_field
        warped = warp(moving, final)
        trace = result.combined_trace()
        metrics = pd.DataFrame([EvaluationService.evaluate_registration(moving, fixed, final, mask)])

        written = [
            DataService.save_tensor(final, out_dir / FILES['FIELD_FILE']),
            DataService.save_tensor(warped, out_dir / FILES['WARPED_FILE']),
            DataService.save_csv(trace, out_dir / FILES['TRACE_FILE']),
            DataService.save_csv(metrics, out_dir / FILES['METRICS_FILE']),
        ]
        if warped.ndim == 2:
            written.append(DataService.save_pgm(warped, out_dir / 'warped.pgm'))
        base = out_dir / FILES['CHECKPOINT_FILE']
        for index, (scale, params) in enumerate(zip(result.scales, result.per_scale_params)):
            written.append(DataService.save_checkpoint(
                params, DataService.scale_checkpoint_path(base, index), metadata={'scale': scale}
            ))
        written.append(PipelineService._write_report(
            out_dir, "Registration",
            [
                ("Loss trace", create_loss_trace_chart(trace)),
                ("Displacement magnitude", create_field_magnitude_heatmap(final)),
                ("Displacement field", create_field_quiver(final)),
                ("Images", create_image_comparison([('moving', moving), ('fixed', fixed), ('warped', warped)])),
            ],
            [("Metrics", metrics)]
        ))
        return written

    @staticmethod
    def run_track(config: RunConfig, out_dir: Path) -> List[Path]:
        frames = [PipelineService._load_image(path, config) for path in config.frames]
        tracking = EvaluationService.track_sequence(
            frames, config.schedule(), config.train_spec(),
            mask=PipelineService._load_mask(config.mask),
            init_params=PipelineService._warm_start(config),
            net_config=config.net_config(frames[0].ndim),
            shared=not config.per_pair
        )
        written = [
            DataService.save_tensor(displacement, out_dir / f"field_pair{index:03d}.mft")
            for index, displacement in enumerate(tracking.fields)
        ]
        traces = [trace.assign(pair=index) for index, trace in enumerate(tracking.traces)]
        trace = pd.concat(traces, ignore_index=True) if traces else TrainingService.trace_frame([])
        written.append(DataService.save_csv(trace, out_dir / FILES['TRACE_FILE']))
        written.append(DataService.save_csv(tracking.metrics, out_dir / FILES['METRICS_FILE']))
        written.append(PipelineService._write_report(
            out_dir, "Tracking",
            [
                ("Per-pair metrics", create_pair_metrics_chart(tracking.metrics)),
                ("First pair displacement", create_field_magnitude_heatmap(tracking.fields[0])),
            ],
            [("Metrics", tracking.metrics)]
        ))
        return written

    @staticmethod
    def run_segment(config: RunConfig, out_dir: Path) -> List[Path]:
        test = PipelineService._load_image(config.fixed, config)
        names, atlases, atlas_labels = DataService.load_atlases(config.atlas_dir)
        if not atlases:
            raise ConfigError(f"No labeled atlases found in {config.atlas_dir}")
        dtype = test.dtype
        atlases = [normalize_volume(a).astype(dtype) if config.normalize else a.astype(dtype) for a in atlases]
        truth = PipelineService._load_labels(config.labels) if config.labels else None
        segmentation = EvaluationService.segment(
            test, atlases, atlas_labels, config.schedule(), config.train_spec(),
            truth=truth,
            init_params=PipelineService._warm_start(config),
            net_config=config.net_config(test.ndim)
        )
        row: Dict[str, Any] = {'atlas_index': segmentation.atlas_index, 'atlas_name': names[segmentation.atlas_index]}
        for class_id, score in segmentation.dice.items():
            row[f'dice_{class_id}'] = score
        metrics = pd.DataFrame([row])
        return [
            DataService.save_tensor(segmentation.labels, out_dir / 'labels.mft'),
            DataService.save_tensor(segmentation.registration.final_field, out_dir / FILES['FIELD_FILE']),
            DataService.save_csv(segmentation.registration.combined_trace(), out_dir / FILES['TRACE_FILE']),
            DataService.save_csv(metrics, out_dir / FILES['METRICS_FILE']),
        ]

    @staticmethod
    def benchmark_schedules(config: RunConfig) -> Dict[str, ScaleSchedule]:
        """Single-scale baseline and the configured schedule at equal total budget"""
        schedule = config.schedule()
        total = config.steps * len(schedule.scales)
        schedules = {'single': ScaleSchedule.equal_budget((1.0,), total)}
        if len(schedule.scales) > 1:
            schedules['multi'] = ScaleSchedule.equal_budget(schedule.scales, total)
        return schedules

    @staticmethod
    def run_benchmark(config: RunConfig, out_dir: Path) -> List[Path]:
        """Synthetic benchmark, warm-started from --checkpoint or from synthetic pretraining"""
        net_config = config.net_config(len(config.dims))
        pretrained = PipelineService._warm_start(config)
        if pretrained is None and config.pretrain_cases > 0:
            pretrained, _ = SyntheticService.pretrain(
                config.train_spec(), config.pretrain_cases, config.dims, config.max_disp,
                seed=config.seed, net_config=net_config
            )
        report = SyntheticService.run_benchmark(
            PipelineService.benchmark_schedules(config), config.train_spec(),
            cases=config.cases, dims=config.dims, max_disp=config.max_disp,
            seed=config.seed, with_labels=True,
            net_config=net_config, pretrained=pretrained
        )
        summary = SyntheticService.summarize(report)
        return [
            DataService.save_csv(report, out_dir / FILES['BENCHMARK_FILE']),
            PipelineService._write_report(
                out_dir, "Synthetic benchmark",
                [("Median endpoint error", create_benchmark_chart(report))],
                [("Median per method and schedule", summary)]
            ),
        ]

    @staticmethod
    def run_train(config: RunConfig, out_dir: Path) -> List[Path]:
        """Population training at the coarsest scale of the schedule"""
        coarsest = config.schedule().scales[0]
        if config.frames:
            images = [PipelineService._load_image(path, config) for path in config.frames]
            pairs = list(zip(images[:-1], images[1:]))
        else:
            pairs = []
            for offset in range(config.cases):
                case = SyntheticService.make_synthetic_case(config.dims, config.max_disp, seed=config.seed + offset)
                pairs.append((case.moving, case.fixed))
        if not pairs:
            raise ConfigError("Training needs at least two frames or one synthetic case")
        net_config = config.net_config(pairs[0][0].ndim)
        pairs = [
            (downsample(m, coarsest).astype(net_config.dtype), downsample(f, coarsest).astype(net_config.dtype))
            for m, f in pairs
        ]
        start = PipelineService._warm_start(config) if config.checkpoint and Path(config.checkpoint).is_file() else None
        params, trace = TrainingService.train_population(
            start or init_params(net_config, config.seed), pairs, config.train_spec()
        )
        target = Path(config.checkpoint) if config.checkpoint else out_dir / FILES['CHECKPOINT_FILE']
        return [
            DataService.save_checkpoint(params, target, metadata={'scale': coarsest, 'pairs': len(pairs)}),
            DataService.save_csv(trace, out_dir / FILES['TRACE_FILE']),
        ]

    @staticmethod
    def run_eval(config: RunConfig, out_dir: Path) -> List[Path]:
        moving = PipelineService._load_image(config.moving, config)
        fixed = PipelineService._load_image(config.fixed, config)
        displacement = DataService.load_tensor(config.field_path)
        if not isinstance(displacement, DisplacementField):
            raise ConfigError(f"{config.field_path} does not hold a displacement field")
        metrics = pd.DataFrame([
            EvaluationService.evaluate_registration(moving, fixed, displacement, PipelineService._load_mask(config.mask))
        ])
        return [DataService.save_csv(metrics, out_dir / FILES['METRICS_FILE'])]


MODE_HANDLERS: Dict[str, Callable[[RunConfig, Path], List[Path]]] = {
    'register': PipelineService.run_register,
    'track': PipelineService.run_track,
    'segment': PipelineService.run_segment,
    'benchmark': PipelineService.run_benchmark,
    'train': PipelineService.run_train,
    'eval': PipelineService.run_eval,
}
