#!/usr/bin/env python3
"""
occ-forge - Main Entry Point

Multimodal semantic occupancy prediction on synthetic scenes: stage-by-stage
commands working on a shared work directory, end-to-end fusion and
distillation runs, and an extrinsic-perturbation robustness sweep.

Exit codes: 0 success, 2 configuration error, 3 data error, 1 other error,
130 interrupted.

Version: 0.1.0
License: MIT
"""

import argparse
import dataclasses
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

# Add src to path for imports
project_root = Path(__file__).parent
sys.path.insert(0, str(project_root))

from src.core.config import PipelineConfig, get_config
from src.core.exceptions import ConfigError, OccForgeError
from src.core.pipeline import StageRunner, run_fusion_pipeline, run_kl_path
from src.core.synthetic_scene import SceneSpec, toy_scene
from src.logging.logger_config import get_logger, log_error, log_info, log_success, log_warning, setup_logging
from src.utils.file_utils import load_camera, load_points
from src.utils.performance_monitor import get_performance_monitor

STAGES = ['generate', 'project', 'diffuse', 'lift', 'fuse', 'distill-weights', 'predict', 'eval']
COMMANDS = STAGES + ['perturb', 'ablate', 'run', 'kl']


class ArgumentParser(argparse.ArgumentParser):
    """argparse that reports usage errors as ConfigError instead of exiting."""

    def error(self, message: str):
        raise ConfigError(message)


def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(',') if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from e


def _sweep(text: str) -> List[List[float]]:
    """'0.05:0.5,0.1:1' -> [[0.05, 0.5], [0.1, 1.0]]"""
    try:
        return [[float(part) for part in pair.split(':')] for pair in text.split(',') if pair.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected translation:rotation pairs, got {text!r}") from e


def _depth_grid(text: str) -> List[List[Any]]:
    """'1:4,1:8' -> [[1.0, 4], [1.0, 8]]"""
    try:
        pairs = [pair.split(':') for pair in text.split(',') if pair.strip()]
        return [[float(r), int(l)] for r, l in pairs]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected range:layers pairs, got {text!r}") from e


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(',') if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from e


def create_parser() -> argparse.ArgumentParser:
    """Create command line argument parser."""
    config = get_config()

    parser = ArgumentParser(
        prog='occ-forge',
        description=config.APP_DESCRIPTION,
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s run --work-dir out/                       # Toy scene, full fusion run
  %(prog)s generate --spec scene.json --out out/
  %(prog)s generate --out out/ --points cloud.csv --camera front.json
  %(prog)s fuse --out out/ --k 7 --direction camera_source
  %(prog)s eval --work-dir out/ --bins 2,4,6
  %(prog)s perturb --work-dir out/ --sweep 0.05:0.5,0.1:1,0.2:2
  %(prog)s ablate --work-dir out/ --ablate-depth 1:4,1:8,2:8 --ablate-windows 3,5,7
  %(prog)s kl --work-dir out/ --config cfg.json

Stages read their inputs from the work directory: generate -> project ->
diffuse -> lift -> fuse -> predict -> eval (distill-weights after lift).
        """
    )

    parser.add_argument(
        'command',
        choices=COMMANDS,
        help='Stage or end-to-end command to run'
    )

    parser.add_argument(
        '--work-dir', '--out',
        dest='work_dir',
        type=Path,
        default=Path('occ_forge_out'),
        help='Directory holding stage artifacts and reports (default: occ_forge_out)'
    )

    parser.add_argument(
        '--scene', '--spec',
        dest='scene',
        type=Path,
        help='Scene spec JSON (default: the built-in toy scene; stages after generate read scene.json)'
    )

    parser.add_argument(
        '--points',
        type=Path,
        help='LiDAR points for generate: a .csv with header x,y,z,class_id or an OCCPTS01 file'
    )

    parser.add_argument(
        '--camera',
        dest='cameras',
        type=Path,
        action='append',
        help='Camera model JSON replacing the scene rig (repeat for several cameras)'
    )

    parser.add_argument(
        '--config',
        type=Path,
        help='JSON file with pipeline parameters; its keys override command line flags'
    )

    parser.add_argument(
        '--seed',
        type=int,
        help=f'Random seed (default: {config.DEFAULT_SEED})'
    )

    parser.add_argument(
        '--radius',
        type=int,
        dest='radius_px',
        help=f'Depth diffusion radius in pixels (default: {config.view_transform.RADIUS_PX})'
    )

    parser.add_argument(
        '--range', '--range-m',
        type=float,
        dest='range_m',
        help=f'Depth discretization range in meters (default: {config.view_transform.RANGE_M})'
    )

    parser.add_argument(
        '--layers',
        type=int,
        help=f'Depth hypotheses per side (default: {config.view_transform.LAYERS})'
    )

    parser.add_argument(
        '--layers-meaning',
        choices=['per_side', 'total'],
        help=f'Read --layers as hypotheses per side or in total (default: {config.view_transform.LAYERS_MEANING})'
    )

    parser.add_argument(
        '--window', '--k',
        type=int,
        dest='window_k',
        help=f'Neighborhood attention window k (default: {config.fusion.WINDOW_K})'
    )

    parser.add_argument(
        '--scale-by',
        choices=sorted(config.fusion.AVAILABLE_SCALES),
        help=f'Attention logit scale: sqrt of the value or the query dimension (default: {config.fusion.SCALE_BY})'
    )

    parser.add_argument(
        '--alpha',
        type=float,
        help=f'Active-region distillation weight (default: {config.distill.ALPHA})'
    )

    parser.add_argument(
        '--beta',
        type=float,
        help=f'Inactive-region distillation weight (default: {config.distill.BETA})'
    )

    parser.add_argument(
        '--direction',
        choices=['camera_source', 'lidar_source'],
        help=f'Fusion direction of the fuse stage and end-to-end runs (default: {config.fusion.DIRECTION})'
    )

    parser.add_argument(
        '--kl-direction',
        choices=['camera_source', 'lidar_source'],
        help=f'Fusion direction of the distillation path (default: {config.fusion.KL_DIRECTION})'
    )

    parser.add_argument(
        '--visible-mask',
        dest='visible_mask',
        action='store_true',
        default=None,
        help='Evaluate only LiDAR-visible voxels (default)'
    )

    parser.add_argument(
        '--no-visible-mask',
        dest='visible_mask',
        action='store_false',
        help='Evaluate every voxel'
    )

    parser.add_argument(
        '--bins',
        type=_float_list,
        dest='distance_bins',
        help='Distance bin edges in meters, e.g. 2,4,6'
    )

    parser.add_argument(
        '--translation',
        type=float,
        dest='perturb_translation',
        help=f'Perturbation translation in meters (default: {config.perturb.TRANSLATION_M})'
    )

    parser.add_argument(
        '--rotation',
        type=float,
        dest='perturb_rotation',
        help=f'Perturbation rotation in degrees (default: {config.perturb.ROTATION_DEG})'
    )

    parser.add_argument(
        '--sweep',
        type=_sweep,
        help='Perturbation magnitudes as translation:rotation pairs, e.g. 0.05:0.5,0.1:1'
    )

    parser.add_argument(
        '--perturb-mode',
        choices=sorted(config.perturb.AVAILABLE_MODES),
        help=f'Draw a perturbation per frame or one per sequence (default: {config.perturb.MODE})'
    )

    parser.add_argument(
        '--trials',
        type=int,
        dest='perturb_trials',
        help=f'Perturbed runs per magnitude (default: {config.perturb.TRIALS})'
    )

    parser.add_argument(
        '--ablate-depth',
        type=_depth_grid,
        dest='ablation_depth',
        help='Discretization ablation as range:layers pairs, e.g. 1:4,1:8,2:8'
    )

    parser.add_argument(
        '--ablate-windows',
        type=_int_list,
        dest='ablation_windows',
        help='Attention window sizes to ablate, e.g. 3,5,7,9'
    )

    parser.add_argument(
        '--workers',
        type=int,
        help=f'Worker threads per stage (default: {config.processing.DEFAULT_WORKERS}, capped by OCC_FORGE_THREADS)'
    )

    parser.add_argument(
        '--log-level',
        choices=sorted(config.logging.AVAILABLE_LOG_LEVELS),
        default=config.logging.DEFAULT_LOG_LEVEL,
        help=f'Logging level (default: {config.logging.DEFAULT_LOG_LEVEL})'
    )

    parser.add_argument(
        '--quiet',
        action='store_true',
        help='Hide progress bars'
    )

    parser.add_argument(
        '--version',
        action='version',
        version=f'{config.APP_NAME} {config.APP_VERSION}'
    )

    return parser


FLAG_KEYS = [
    'seed', 'radius_px', 'range_m', 'layers', 'layers_meaning', 'window_k', 'scale_by', 'alpha', 'beta', 'direction',
    'kl_direction', 'visible_mask', 'distance_bins', 'perturb_translation', 'perturb_rotation', 'sweep',
    'perturb_mode', 'perturb_trials', 'ablation_depth', 'ablation_windows', 'workers',
]


def build_config(args: argparse.Namespace) -> PipelineConfig:
    """Defaults, then command line flags, then the --config file."""
    cfg = PipelineConfig.from_app_config()
    cfg = cfg.with_overrides({key: getattr(args, key) for key in FLAG_KEYS})
    if args.config is not None:
        cfg = cfg.with_json_file(args.config)
    return cfg.validate()


def load_scene(args: argparse.Namespace, cfg: PipelineConfig) -> SceneSpec:
    """--scene, else the work dir scene.json after generate, else the toy scene; --camera replaces the rig."""
    scene_file = args.work_dir / 'scene.json'
    if args.scene is not None:
        scene = SceneSpec.load(args.scene)
    elif args.command != 'generate' and scene_file.exists():
        scene = SceneSpec.load(scene_file)
    else:
        scene = toy_scene(cfg.seed)
    if args.cameras:
        scene = dataclasses.replace(scene, cameras=tuple(load_camera(path) for path in args.cameras))
    return scene


def run_command(args: argparse.Namespace, cfg: PipelineConfig) -> Dict[str, Any]:
    """Dispatch one command; returns a flat summary for the log."""
    work_dir: Path = args.work_dir
    show_progress = not args.quiet

    if args.command == 'run':
        _, report = run_fusion_pipeline(cfg, load_scene(args, cfg), work_dir, cfg.workers)
        return {"binary_iou": report["fused"]["binary_iou"], "miou": report["fused"]["miou"]}
    if args.command == 'kl':
        _, report = run_kl_path(cfg, load_scene(args, cfg), work_dir=work_dir, workers=cfg.workers)
        return {key: report[key] for key in ("n_ar", "n_ir", "rho", "loss", "balanced")}

    if args.command in ('generate', 'perturb', 'ablate'):
        runner = StageRunner(cfg, work_dir, load_scene(args, cfg), cfg.workers)
    else:
        runner = StageRunner(cfg, work_dir, SceneSpec.load(args.scene) if args.scene else None, cfg.workers)

    stages: Dict[str, Callable[[], Dict[str, Any]]] = {
        'generate': lambda: runner.generate(load_points(args.points) if args.points else None),
        'project': runner.project,
        'diffuse': runner.diffuse,
        'lift': runner.lift,
        'fuse': runner.fuse,
        'distill-weights': runner.distill_weights,
        'predict': runner.predict,
        'eval': runner.eval,
        'perturb': lambda: runner.perturb(show_progress),
        'ablate': lambda: runner.ablate(show_progress),
    }
    return stages[args.command]()


def main(argv: Optional[List[str]] = None) -> int:
    """Main application entry point."""
    args = None
    try:
        parser = create_parser()
        args = parser.parse_args(argv)

        setup_logging(log_dir=args.work_dir / 'logs', log_level=args.log_level)
        cfg = build_config(args)
        log_info(f"occ-forge {args.command} (work dir: {args.work_dir}, seed: {cfg.seed}, workers: {cfg.workers})")

        monitor = get_performance_monitor()
        with monitor.timed_stage(args.command):
            summary = run_command(args, cfg)
        monitor.save(args.work_dir / 'performance.json')

        get_logger().log_metrics(args.command, summary)
        log_success(f"{args.command} completed")
        return 0

    except KeyboardInterrupt:
        log_warning("Process interrupted by user")
        return 130
    except OccForgeError as e:
        log_error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except Exception as e:
        get_logger().log_error_with_context(e, {"command": getattr(args, 'command', None)})
        return 1


if __name__ == "__main__":
    sys.exit(main())
