"""
Command line entry point of the Registration Tool.
"""
import logging
import sys
from argparse import ArgumentParser
from typing import List, Optional

from config import NETWORK, REGISTRATION, SCHEDULES, SYNTHETIC
from services.pipeline_service import MODES, PipelineService, RunConfig

logger = logging.getLogger(__name__)


def parse_args(argv: Optional[List[str]] = None):
    """Parse command line arguments."""
    parser = ArgumentParser(
        description="""Multi-scale test-time-trained deformable image
        registration: register pairs, track frame sequences, segment with
        atlases, run the synthetic benchmark, train or evaluate."""
    )
    required = parser.add_argument_group("required arguments")
    required.add_argument("--mode", choices=MODES, required=True, help="What to run.")

    parser.add_argument("--moving", metavar="FILE", help="Moving image (.mft or .pgm).")
    parser.add_argument("--fixed", metavar="FILE", help="Fixed image; the test image in segment mode.")
    parser.add_argument("--frames", metavar="FILE", nargs="+", default=[], help="Frame sequence for track or train mode.")
    parser.add_argument("--atlas-dir", metavar="DIR", help="Directory of atlas images with <name>.labels.mft label maps.")
    parser.add_argument("--labels", metavar="FILE", help="Ground-truth labels of the test image (segment mode).")
    parser.add_argument("--mask", metavar="FILE", help="Evaluation mask; defaults to the value-range mask.")
    parser.add_argument("--field", dest="field_path", metavar="FILE", help="Displacement field to evaluate (eval mode).")
    parser.add_argument("--scales", metavar="LIST", help="Comma separated scales such as 1/8,1/4,1/2,1; overrides --profile.")
    parser.add_argument("--profile", choices=[k for k in SCHEDULES if k != 'DEFAULT_PROFILE'],
                        default=SCHEDULES['DEFAULT_PROFILE'], help="Named scale schedule.")
    parser.add_argument("--steps", type=int, default=REGISTRATION['STEPS'], help="Optimization steps per scale.")
    parser.add_argument("--lambda", dest="lam", type=float, default=REGISTRATION['LAMBDA'], help="Smoothness weight.")
    parser.add_argument("--lr", type=float, default=REGISTRATION['LEARNING_RATE'], help="Adam learning rate.")
    parser.add_argument("--smoothness-reduction", choices=("sum", "mean"),
                        default=REGISTRATION['SMOOTHNESS_REDUCTION'],
                        help="Sum or mean of squared field differences in the training objective.")
    parser.add_argument("--per-pair", action="store_true",
                        help="Track mode: register every frame pair with its own step budget.")
    parser.add_argument("--pretrain-cases", type=int, default=SYNTHETIC['PRETRAIN_CASES'],
                        help="Benchmark mode: synthetic pairs to pretrain on when no --checkpoint is given.")
    parser.add_argument("--window", type=int, default=None, help="NLCC window extent at full resolution.")
    parser.add_argument("--seed", type=int, default=REGISTRATION['SEED'], help="Seed for initialization and sampling.")
    parser.add_argument("--precision", type=int, choices=(32, 64), default=NETWORK['PRECISION'], help="Floating point width.")
    parser.add_argument("--out-dir", metavar="DIR", default="runs/latest", help="Directory for all run artifacts.")
    parser.add_argument("--checkpoint", metavar="FILE",
                        help="Warm-start parameters; the output path in train mode.")
    parser.add_argument("--cases", type=int, default=SYNTHETIC['CASES'], help="Synthetic cases for benchmark/train.")
    parser.add_argument("--max-disp", type=float, default=SYNTHETIC['MAX_DISP'], help="Largest synthetic displacement in pixels.")
    parser.add_argument("--dims", type=int, nargs="+", default=list(SYNTHETIC['DIMS']), help="Synthetic grid extents.")
    parser.add_argument("--no-normalize", dest="normalize", action="store_false",
                        help="Skip intensity normalization of loaded images.")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug-level logging.")
    return parser.parse_args(argv)


def build_config(args) -> RunConfig:
    values = vars(args).copy()
    values.pop('verbose', None)
    return RunConfig(**values)


def main(argv: Optional[List[str]] = None) -> int:
    args = parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        stream=sys.stdout
    )
    status = PipelineService.run(build_config(args))
    logger.info(f"Finished with exit status {status}")
    return status


if __name__ == "__main__":
    sys.exit(main())
