"""
Centralized configuration management for occ-forge.

AppConfig holds the defaults (one dataclass per concern, UPPER_CASE constants)
and environment overrides. PipelineConfig is the flat, validated parameter set
a pipeline run consumes; it is built from AppConfig, then CLI flags, then an
optional JSON file whose keys win over flags.
"""

from dataclasses import dataclass, field, fields, asdict
from pathlib import Path
from typing import Any, Dict, List, Optional, Set, Tuple
import json
import os

from src.core.exceptions import ConfigError
from src.core.losses import LossWeights
from src.core.models import FusionDirection, LayersMeaning, VoxelGridSpec


@dataclass
class GridConfig:
    """Voxel grid defaults (toy desk-scale grid plus the Occ3D preset)."""

    X_MIN: float = -4.0
    X_MAX: float = 4.0
    Y_MIN: float = -4.0
    Y_MAX: float = 4.0
    Z_MIN: float = -1.0
    Z_MAX: float = 2.2
    VOXEL_SIZE: float = 0.4
    NUM_CLASSES: int = 4

    OCC3D_RANGE: Tuple[float, float, float, float, float, float] = (-40.0, 40.0, -40.0, 40.0, -1.0, 5.4)
    OCC3D_VOXEL_SIZE: float = 0.4
    OCC3D_NUM_CLASSES: int = 16

    def toy_grid(self) -> VoxelGridSpec:
        return VoxelGridSpec(self.X_MIN, self.X_MAX, self.Y_MIN, self.Y_MAX,
                             self.Z_MIN, self.Z_MAX, self.VOXEL_SIZE)

    def occ3d_grid(self) -> VoxelGridSpec:
        x_min, x_max, y_min, y_max, z_min, z_max = self.OCC3D_RANGE
        return VoxelGridSpec(x_min, x_max, y_min, y_max, z_min, z_max, self.OCC3D_VOXEL_SIZE)


@dataclass
class ViewTransformConfig:
    """Depth diffusion, discretization and lifting defaults."""

    RADIUS_PX: int = 7
    RANGE_M: float = 1.0
    LAYERS: int = 8
    LAYERS_MEANING: str = LayersMeaning.PER_SIDE.value
    ORACLE_SIGMA_M: float = 0.05
    SEG_LOGIT_MARGIN: float = 10.0


@dataclass
class FusionConfig:
    """Neighborhood attention and gate defaults."""

    WINDOW_K: int = 7
    SCALE_BY: str = 'value'
    AVAILABLE_SCALES: Set[str] = field(default_factory=lambda: {'value', 'query'})
    LOCALITY: float = 50.0
    GATE_BIAS: float = 50.0
    DIRECTION: str = FusionDirection.CAMERA_SOURCE.value
    KL_DIRECTION: str = FusionDirection.LIDAR_SOURCE.value


@dataclass
class DistillConfig:
    """Active distillation defaults."""

    ALPHA: float = 1.0
    BETA: float = 1.0
    EPS: float = 0.0
    NORMALIZE: bool = False


@dataclass
class LossConfig:
    """Loss weights."""

    LAMBDA_DEPTH: float = 0.05
    LAMBDA_SEG: float = 0.5
    LAMBDA_PTS: float = 1.0
    LAMBDA_MASK_OCC: float = 1.0
    LAMBDA_KL: float = 1.0
    PTS_LOVASZ_WEIGHT: float = 1.0
    PTS_CE_WEIGHT: float = 1.0


@dataclass
class EvalConfig:
    """Evaluation defaults."""

    VISIBLE_MASK: bool = True
    DISTANCE_BINS: Tuple[float, ...] = (2.0, 4.0, 6.0)
    UNDEFINED_POLICY: str = 'exclude'
    AVAILABLE_POLICIES: Set[str] = field(default_factory=lambda: {'exclude', 'zero', 'one'})
    EMPTY_FLOOR: float = 0.1


@dataclass
class PerturbConfig:
    """Extrinsic perturbation defaults."""

    TRANSLATION_M: float = 0.1
    ROTATION_DEG: float = 1.0
    MODE: str = 'per_frame'
    AVAILABLE_MODES: Set[str] = field(default_factory=lambda: {'per_frame', 'per_sequence'})
    TRIALS: int = 3
    SWEEP: Tuple[Tuple[float, float], ...] = ((0.05, 0.5), (0.1, 1.0), (0.2, 2.0))


@dataclass
class AblationConfig:
    """Hyperparameter ablation grids: (range m, layers) pairs and window sizes."""

    DEPTH_GRID: Tuple[Tuple[float, int], ...] = ((1.0, 4), (1.0, 8), (1.0, 12), (2.0, 4), (2.0, 8), (2.0, 12))
    WINDOWS: Tuple[int, ...] = (3, 5, 7, 9)


@dataclass
class ProcessingConfig:
    """Parallelism configuration."""

    DEFAULT_WORKERS: int = 4
    MAX_WORKERS: int = 16
    MIN_WORKERS: int = 1
    THREAD_CAP: Optional[int] = None
    CHUNK_SIZE: int = 65536


@dataclass
class LoggingConfig:
    """Logging configuration."""

    DEFAULT_LOG_LEVEL: str = 'INFO'
    AVAILABLE_LOG_LEVELS: Set[str] = field(default_factory=lambda: {
        'DEBUG', 'INFO', 'WARNING', 'ERROR'
    })
    CONSOLE_FORMAT: str = "<level>{level: <8}</level> | <level>{message}</level>"
    FILE_FORMAT: str = "{time:YYYY-MM-DD HH:mm:ss.SSS} | {level: <8} | {name}:{function}:{line} - {message}"
    LOG_ENCODING: str = 'utf-8'
    LOG_FILE_NAME: str = 'occ_forge.log'
    ERROR_LOG_NAME: str = 'errors.log'


@dataclass
class AppConfig:
    """Main application configuration."""

    APP_NAME: str = "occ-forge"
    APP_VERSION: str = "0.1.0"
    APP_DESCRIPTION: str = "Multimodal semantic occupancy prediction toolkit"
    DEFAULT_SEED: int = 0

    grid: GridConfig = field(default_factory=GridConfig)
    view_transform: ViewTransformConfig = field(default_factory=ViewTransformConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    perturb: PerturbConfig = field(default_factory=PerturbConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    processing: ProcessingConfig = field(default_factory=ProcessingConfig)
    logging: LoggingConfig = field(default_factory=LoggingConfig)

    def __post_init__(self):
        self._validate_config()

    def _validate_config(self):
        if self.processing.MIN_WORKERS > self.processing.MAX_WORKERS:
            raise ConfigError("MIN_WORKERS cannot be greater than MAX_WORKERS")

        if self.processing.DEFAULT_WORKERS < self.processing.MIN_WORKERS:
            self.processing.DEFAULT_WORKERS = self.processing.MIN_WORKERS
        elif self.processing.DEFAULT_WORKERS > self.processing.MAX_WORKERS:
            self.processing.DEFAULT_WORKERS = self.processing.MAX_WORKERS

        if self.processing.THREAD_CAP is not None and self.processing.THREAD_CAP < 1:
            raise ConfigError("thread cap must be at least 1", {"cap": self.processing.THREAD_CAP})

        if self.logging.DEFAULT_LOG_LEVEL not in self.logging.AVAILABLE_LOG_LEVELS:
            raise ConfigError(f"Invalid log level: {self.logging.DEFAULT_LOG_LEVEL}")

        if self.fusion.SCALE_BY not in self.fusion.AVAILABLE_SCALES:
            raise ConfigError(f"Invalid attention scale: {self.fusion.SCALE_BY}")

    @classmethod
    def from_env(cls) -> 'AppConfig':
        """Create configuration from environment variables."""
        config = cls()

        threads = os.getenv('OCC_FORGE_THREADS')
        if threads:
            try:
                config.processing.THREAD_CAP = int(threads)
            except ValueError as e:
                raise ConfigError(f"OCC_FORGE_THREADS must be an integer, got {threads!r}") from e
            config._validate_config()

        if os.getenv('OCC_FORGE_LOG_LEVEL'):
            config.logging.DEFAULT_LOG_LEVEL = os.getenv('OCC_FORGE_LOG_LEVEL').upper()
            config._validate_config()

        seed = os.getenv('OCC_FORGE_SEED')
        if seed:
            try:
                config.DEFAULT_SEED = int(seed)
            except ValueError as e:
                raise ConfigError(f"OCC_FORGE_SEED must be an integer, got {seed!r}") from e

        return config


# Global configuration instance
config = AppConfig.from_env()


def get_config() -> AppConfig:
    """Get the global configuration instance."""
    return config


def reload_config() -> AppConfig:
    """Reload configuration from environment variables."""
    global config
    config = AppConfig.from_env()
    return config


@dataclass
class PipelineConfig:
    """Everything one pipeline run depends on."""

    grid: VoxelGridSpec
    num_classes: int
    radius_px: int
    range_m: float
    layers: int
    layers_meaning: str
    window_k: int
    scale_by: str
    locality: float
    gate_bias: float
    direction: str
    kl_direction: str
    alpha: float
    beta: float
    eps: float
    normalize_distill: bool
    loss_weights: LossWeights
    pts_lovasz_weight: float
    pts_ce_weight: float
    visible_mask: bool
    distance_bins: List[float]
    undefined_policy: str
    empty_floor: float
    oracle_sigma: float
    seg_logit_margin: float
    perturb_translation: float
    perturb_rotation: float
    perturb_mode: str
    perturb_trials: int
    sweep: List[Tuple[float, float]]
    ablation_depth: List[Tuple[float, int]]
    ablation_windows: List[int]
    seed: int
    workers: int

    @classmethod
    def from_app_config(cls, app: Optional[AppConfig] = None) -> 'PipelineConfig':
        app = app or get_config()
        return cls(
            grid=app.grid.toy_grid(),
            num_classes=app.grid.NUM_CLASSES,
            radius_px=app.view_transform.RADIUS_PX,
            range_m=app.view_transform.RANGE_M,
            layers=app.view_transform.LAYERS,
            layers_meaning=app.view_transform.LAYERS_MEANING,
            window_k=app.fusion.WINDOW_K,
            scale_by=app.fusion.SCALE_BY,
            locality=app.fusion.LOCALITY,
            gate_bias=app.fusion.GATE_BIAS,
            direction=app.fusion.DIRECTION,
            kl_direction=app.fusion.KL_DIRECTION,
            alpha=app.distill.ALPHA,
            beta=app.distill.BETA,
            eps=app.distill.EPS,
            normalize_distill=app.distill.NORMALIZE,
            loss_weights=LossWeights(
                lambda_depth=app.losses.LAMBDA_DEPTH,
                lambda_seg=app.losses.LAMBDA_SEG,
                lambda_pts=app.losses.LAMBDA_PTS,
                lambda_mask_occ=app.losses.LAMBDA_MASK_OCC,
                lambda_kl=app.losses.LAMBDA_KL,
            ),
            pts_lovasz_weight=app.losses.PTS_LOVASZ_WEIGHT,
            pts_ce_weight=app.losses.PTS_CE_WEIGHT,
            visible_mask=app.evaluation.VISIBLE_MASK,
            distance_bins=list(app.evaluation.DISTANCE_BINS),
            undefined_policy=app.evaluation.UNDEFINED_POLICY,
            empty_floor=app.evaluation.EMPTY_FLOOR,
            oracle_sigma=app.view_transform.ORACLE_SIGMA_M,
            seg_logit_margin=app.view_transform.SEG_LOGIT_MARGIN,
            perturb_translation=app.perturb.TRANSLATION_M,
            perturb_rotation=app.perturb.ROTATION_DEG,
            perturb_mode=app.perturb.MODE,
            perturb_trials=app.perturb.TRIALS,
            sweep=[tuple(pair) for pair in app.perturb.SWEEP],
            ablation_depth=[(float(r), int(l)) for r, l in app.ablation.DEPTH_GRID],
            ablation_windows=list(app.ablation.WINDOWS),
            seed=app.DEFAULT_SEED,
            workers=app.processing.DEFAULT_WORKERS,
        )

    @property
    def class_count(self) -> int:
        return self.num_classes + 1

    @property
    def depth_bins(self) -> int:
        return self.grid.depth_bins

    @property
    def channels(self) -> int:
        return self.class_count * self.depth_bins

    def hypotheses_per_side(self) -> int:
        """Depth hypotheses on each side of the co-point depth."""
        if self.layers_meaning == LayersMeaning.TOTAL.value:
            return self.layers // 2
        return self.layers

    def with_overrides(self, overrides: Dict[str, Any]) -> 'PipelineConfig':
        """Return a copy with the given keys replaced (unknown keys are an error)."""
        known = {f.name for f in fields(self)}
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        for key, value in overrides.items():
            if key not in known:
                raise ConfigError(f"Unknown configuration key: {key}")
            if value is None:
                continue
            if key == "grid" and isinstance(value, dict):
                value = VoxelGridSpec.from_dict({**values["grid"].to_dict(), **value})
            elif key == "loss_weights" and isinstance(value, dict):
                value = LossWeights(**{**asdict(values["loss_weights"]), **value})
            elif key == "sweep":
                value = [tuple(float(v) for v in pair) for pair in value]
            elif key == "distance_bins":
                value = [float(v) for v in value]
            elif key == "ablation_depth":
                value = [(float(r), int(l)) for r, l in value]
            elif key == "ablation_windows":
                value = [int(k) for k in value]
            values[key] = value
        return PipelineConfig(**values)

    def with_json_file(self, path: Path) -> 'PipelineConfig':
        """Apply overrides from a JSON object file."""
        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except FileNotFoundError as e:
            raise ConfigError(f"Config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file is not valid JSON: {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"Config file must hold a JSON object: {path}")
        return self.with_overrides(data)

    def validate(self) -> 'PipelineConfig':
        """Check parameter invariants of all downstream modules."""
        if self.num_classes < 1:
            raise ConfigError("num_classes must be at least 1", {"num_classes": self.num_classes})
        if self.radius_px < 0:
            raise ConfigError("diffusion radius must be non-negative", {"radius_px": self.radius_px})
        if self.range_m <= 0:
            raise ConfigError("discretization range must be positive", {"range_m": self.range_m})
        if self.layers_meaning not in {m.value for m in LayersMeaning}:
            raise ConfigError(f"Invalid layers meaning: {self.layers_meaning}")
        if self.layers < 1 or self.hypotheses_per_side() < 1:
            raise ConfigError("layers must give at least one hypothesis per side",
                              {"layers": self.layers, "meaning": self.layers_meaning})
        if self.window_k < 1 or self.window_k % 2 == 0:
            raise ConfigError("window k must be a positive odd integer", {"k": self.window_k})
        if self.scale_by not in {'value', 'query'}:
            raise ConfigError(f"Invalid attention scale: {self.scale_by}")
        for direction in (self.direction, self.kl_direction):
            if direction not in {d.value for d in FusionDirection}:
                raise ConfigError(f"Invalid fusion direction: {direction}")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be non-negative", {"alpha": self.alpha, "beta": self.beta})
        if self.eps < 0:
            raise ConfigError("occupancy eps must be non-negative", {"eps": self.eps})
        self.loss_weights.validate()
        if self.pts_lovasz_weight < 0 or self.pts_ce_weight < 0:
            raise ConfigError("point-loss mixing weights must be non-negative")
        if any(b <= 0 for b in self.distance_bins) or list(self.distance_bins) != sorted(set(self.distance_bins)):
            raise ConfigError("distance bins must be positive and strictly increasing",
                              {"bins": self.distance_bins})
        if self.undefined_policy not in {'exclude', 'zero', 'one'}:
            raise ConfigError(f"Invalid undefined-IoU policy: {self.undefined_policy}")
        if self.oracle_sigma <= 0:
            raise ConfigError("oracle sigma must be positive", {"sigma": self.oracle_sigma})
        if self.perturb_translation < 0 or self.perturb_rotation < 0:
            raise ConfigError("perturbation magnitudes must be non-negative")
        if any(t < 0 or r < 0 for t, r in self.sweep):
            raise ConfigError("sweep magnitudes must be non-negative", {"sweep": self.sweep})
        if self.perturb_mode not in {'per_frame', 'per_sequence'}:
            raise ConfigError(f"Invalid perturbation mode: {self.perturb_mode}")
        if self.perturb_trials < 1:
            raise ConfigError("perturbation trials must be at least 1")
        if any(r <= 0 or l < 1 for r, l in self.ablation_depth):
            raise ConfigError("ablation ranges must be positive and layers at least 1",
                              {"ablation_depth": self.ablation_depth})
        if any(k < 1 or k % 2 == 0 for k in self.ablation_windows):
            raise ConfigError("ablation windows must be positive odd integers",
                              {"ablation_windows": self.ablation_windows})
        if self.workers < 1:
            raise ConfigError("workers must be at least 1", {"workers": self.workers})
        return self

    def to_dict(self) -> Dict[str, Any]:
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data["grid"] = self.grid.to_dict()
        data["loss_weights"] = asdict(self.loss_weights)
        data["sweep"] = [list(pair) for pair in self.sweep]
        data["ablation_depth"] = [list(pair) for pair in self.ablation_depth]
        return data
