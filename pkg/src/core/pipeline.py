#!/usr/bin/env python3
"""
End-to-end occupancy pipeline.

OccupancyPipeline wires the stages together for one scene: synthesize the
sensor data, scatter LiDAR co-points into each camera, diffuse and
discretize depth, lift oracle-guided class indicators into a camera BEV
map, fuse it with the voxelized LiDAR BEV map, decode occupancy and
evaluate it against the ground truth. StageRunner exposes the same stages
one at a time on a work directory for the CLI.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from src.core.config import PipelineConfig
from src.core.distillation import (
    DistillWeightMap,
    distill_loss,
    distill_weights,
    occupancy_mask,
    region_split,
    write_weight_pgm,
)
from src.core.exceptions import ConfigError, DataError
from src.core.fusion import ScaleBy, fuse_bev, locality_attention_params, saturated_gate_params
from src.core.geometry import copoint_displacement, perturb_extrinsics
from src.core.losses import LossReport, cross_entropy, masked_cross_entropy, pts_loss
from src.core.metrics import EvaluationReport, UndefinedPolicy, evaluate
from src.core.models import (
    BevFeatureMap,
    CameraModel,
    DepthHypotheses,
    DepthMap,
    FusionDirection,
    ImageFeatureMap,
    OccupancyGrid,
    Point3,
    PointCloud,
    SemanticMask,
)
from src.core.occupancy_head import apply_empty_floor, channel_to_height, decode_labels, write_occupancy_slices
from src.core.synthetic_scene import (
    LidarScan,
    SceneSpec,
    ground_truth_occupancy,
    lidar_visibility_mask,
    raycast_lidar,
    render_semantics_and_depth,
)
from src.core.view_transform import (
    bev_coverage,
    build_virtual_points,
    class_indicator_features,
    diffuse_depth,
    discretize_depths,
    nearest_hypothesis,
    normalize_bev,
    oracle_depth_logits,
    pool_to_bev,
    scatter_copoints,
    single_hypothesis_points,
    voxelize_lidar_to_bev,
)
from src.logging.logger_config import get_logger, log_debug, log_info, log_success
from src.utils.file_utils import (
    load_point_cloud,
    load_tensor,
    save_point_cloud,
    save_tensor,
    write_csv,
    write_json,
)
from src.utils.performance_monitor import get_performance_monitor, timed_operation


@dataclass(eq=False)
class SceneProducts:
    """Sensor data and ground truth synthesized from a scene."""
    scan: LidarScan
    truth: OccupancyGrid
    visible: np.ndarray
    renders: Dict[str, Tuple[SemanticMask, DepthMap]]

    @property
    def cloud(self) -> PointCloud:
        return self.scan.cloud()


@dataclass(eq=False)
class CameraProducts:
    """Per-camera intermediates of the view transformation."""
    name: str
    sparse: DepthMap
    copoints: SemanticMask
    extended: DepthMap
    hypotheses: DepthHypotheses
    depth_logits: np.ndarray
    bev: BevFeatureMap


@dataclass(eq=False)
class KLResult:
    """Outputs of the distillation path."""
    fused: BevFeatureMap
    weights: DistillWeightMap
    loss: float
    grad: np.ndarray

    def summary(self) -> Dict[str, Any]:
        ar_total, ir_total = self.weights.region_totals()
        return {
            **self.weights.summary(),
            "loss": self.loss,
            "ar_total": float(ar_total),
            "ir_total": float(ir_total),
            "balanced": ar_total == ir_total,
        }


@dataclass(eq=False)
class RunResult:
    """Everything one fusion run produces."""
    prediction: OccupancyGrid
    camera_prediction: OccupancyGrid
    fused_bev: BevFeatureMap
    camera_bev: BevFeatureMap
    lidar_bev: BevFeatureMap
    metrics: EvaluationReport
    camera_metrics: EvaluationReport
    losses: LossReport
    kl: KLResult
    cameras: Dict[str, CameraProducts] = field(default_factory=dict)

    def report(self) -> Dict[str, Any]:
        return {
            "fused": self.metrics.to_dict(),
            "camera_only": self.camera_metrics.to_dict(),
            "losses": self.losses.to_dict(),
            "distill": self.kl.summary(),
        }


def _one_hot(labels: np.ndarray, count: int) -> np.ndarray:
    return np.eye(count)[labels.reshape(-1)]


class OccupancyPipeline:
    """
    Stage-by-stage occupancy prediction on a synthetic scene.

    Learned components are replaced by deterministic stand-ins: the depth
    distribution is a Gaussian around the oracle depth, context features are
    one-hot class indicators of the oracle mask, attention uses identity
    projections with a strong locality bias and the gate is saturated open.
    """

    def __init__(self, cfg: PipelineConfig, scene: SceneSpec, workers: Optional[int] = None):
        self.cfg = cfg.validate()
        if scene.num_classes != cfg.num_classes:
            raise ConfigError("scene and configuration disagree on the number of classes",
                              {"scene": scene.num_classes, "config": cfg.num_classes})
        self.scene = scene
        self.workers = workers if workers is not None else cfg.workers
        self.grid = cfg.grid
        self.bev_spec = cfg.grid.bev(cfg.channels)
        self.attention = locality_attention_params(cfg.channels, cfg.window_k, cfg.locality)
        self.gate = saturated_gate_params(cfg.channels, cfg.gate_bias)
        self.monitor = get_performance_monitor()
        self.ego = Point3(*scene.lidar.origin)

    # ------------------------------------------------------------------
    # Stages
    # ------------------------------------------------------------------

    def generate(self) -> SceneProducts:
        with self.monitor.timed_stage("generate", seed=self.scene.seed):
            scan = raycast_lidar(self.scene, workers=self.workers)
            truth = ground_truth_occupancy(self.scene, self.grid)
            visible = lidar_visibility_mask(self.scene, scan, self.grid, workers=self.workers)
            renders = {cam.name: render_semantics_and_depth(self.scene, cam) for cam in self.scene.cameras}
        log_debug(f"Scene: {len(scan)} LiDAR points, {int(truth.occupied().sum())} occupied voxels, "
                  f"{int(visible.sum())} visible voxels")
        return SceneProducts(scan, truth, visible, renders)

    def project(self, camera: CameraModel, cloud: PointCloud) -> Tuple[DepthMap, SemanticMask]:
        return scatter_copoints(cloud, camera.extrinsics, camera.intrinsics, self.cfg.num_classes)

    def diffuse(self, sparse: DepthMap, mask: SemanticMask) -> DepthMap:
        return diffuse_depth(sparse, mask, self.cfg.radius_px, workers=self.workers)

    def discretize(self, extended: DepthMap) -> DepthHypotheses:
        return discretize_depths(extended, self.cfg.range_m, self.cfg.layers, self.cfg.layers_meaning)

    def lift(self, camera: CameraModel, extended: DepthMap, mask: SemanticMask,
             oracle: DepthMap) -> Tuple[DepthHypotheses, np.ndarray, BevFeatureMap]:
        """Hypotheses, oracle depth logits and the (unnormalized) camera BEV contribution."""
        hyps = self.discretize(extended)
        logits = oracle_depth_logits(hyps, oracle, self.cfg.oracle_sigma)
        features = class_indicator_features(mask, self.cfg.class_count)
        vps = build_virtual_points(ImageFeatureMap(features, logits), hyps, camera.extrinsics, camera.intrinsics)
        return hyps, logits, pool_to_bev(vps, self.bev_spec, z_bins=self.grid)

    def camera_products(self, camera: CameraModel, products: SceneProducts) -> CameraProducts:
        """Run project, diffuse and lift for one camera (possibly with perturbed extrinsics)."""
        mask, oracle = products.renders[camera.name]
        sparse, copoints = self.project(camera, products.cloud)
        extended = self.diffuse(sparse, mask)
        hyps, logits, bev = self.lift(camera, extended, mask, oracle)
        return CameraProducts(camera.name, sparse, copoints, extended, hyps, logits, bev)

    def camera_bev(self, contributions: Sequence[BevFeatureMap]) -> BevFeatureMap:
        """Sum of the per-camera maps, normalized over classes per (height, cell)."""
        total = BevFeatureMap.zeros(self.bev_spec).features
        for bev in contributions:
            total = total + bev.features
        return normalize_bev(BevFeatureMap(total), self.cfg.depth_bins)

    def lidar_bev(self, cloud: PointCloud) -> BevFeatureMap:
        return voxelize_lidar_to_bev(cloud, self.grid, self.cfg.num_classes)

    def fuse(self, camera: BevFeatureMap, lidar: BevFeatureMap,
             direction: Optional[FusionDirection] = None) -> BevFeatureMap:
        """Fuse in `direction`, cfg.direction when omitted."""
        direction = FusionDirection(direction or self.cfg.direction)
        return fuse_bev(camera, lidar, self.attention, self.gate, direction,
                        ScaleBy(self.cfg.scale_by), self.workers)

    def predict(self, bev: BevFeatureMap) -> OccupancyGrid:
        logits = channel_to_height(bev, self.cfg.class_count, self.cfg.depth_bins)
        return decode_labels(apply_empty_floor(logits, self.cfg.empty_floor))

    def evaluate(self, prediction: OccupancyGrid, truth: OccupancyGrid, visible: np.ndarray) -> EvaluationReport:
        """Metrics against the truth, under the visibility mask when cfg.visible_mask is set."""
        visible = visible if self.cfg.visible_mask else None
        return evaluate(prediction, truth, visible, policy=UndefinedPolicy(self.cfg.undefined_policy),
                        grid=self.grid, ego=self.ego, bins=self.cfg.distance_bins, workers=self.workers)

    def distill(self, camera: BevFeatureMap, lidar: BevFeatureMap) -> KLResult:
        fused = self.fuse(camera, lidar, FusionDirection(self.cfg.kl_direction))
        ar, ir = region_split(occupancy_mask(fused, self.cfg.eps), occupancy_mask(camera, self.cfg.eps))
        weights = distill_weights(ar, ir, self.cfg.alpha, self.cfg.beta)
        loss, grad = distill_loss(fused, camera, weights, self.cfg.normalize_distill)
        return KLResult(fused, weights, loss, grad)

    def losses(self, prediction: OccupancyGrid, truth: OccupancyGrid, visible: np.ndarray, cloud: PointCloud,
               renders: Dict[str, Tuple[SemanticMask, DepthMap]], cameras: Dict[str, CameraProducts],
               kl: KLResult) -> LossReport:
        """The five training terms evaluated on the stand-in outputs."""
        depth_logits, depth_targets = [], []
        seg_logits, seg_targets = [], []
        mask_classes = self.cfg.num_classes + 1
        for name, cam in cameras.items():
            mask, oracle = renders[name]
            target = nearest_hypothesis(cam.hypotheses, oracle)
            selected = target >= 0
            depth_logits.append(cam.depth_logits[selected])
            depth_targets.append(target[selected])
            seg_logits.append(self.cfg.seg_logit_margin * _one_hot(mask.labels, mask_classes))
            seg_targets.append(mask.labels.reshape(-1))

        hypotheses = max((c.hypotheses.count for c in cameras.values()), default=2)
        depth = cross_entropy(np.concatenate(depth_logits) if depth_logits else np.zeros((0, hypotheses)),
                              np.concatenate(depth_targets) if depth_targets else np.zeros(0, dtype=np.int64))[0]
        seg = cross_entropy(np.concatenate(seg_logits) if seg_logits else np.zeros((0, mask_classes)),
                            np.concatenate(seg_targets) if seg_targets else np.zeros(0, dtype=np.int64))[0]

        # voxel-major logits: (H, W, D, C_N) flattened like the label grid
        voxel_logits = np.transpose(prediction.logits, (2, 3, 1, 0)).reshape(-1, prediction.class_count)
        labels = truth.labels.reshape(-1)
        index, inside = self.grid.voxel_index(cloud.points)
        n_x, n_y, n_z = self.grid.shape
        hit = np.unique((index[inside, 0] * n_y + index[inside, 1]) * n_z + index[inside, 2])
        pts, _ = pts_loss(voxel_logits[hit], labels[hit], self.cfg.pts_lovasz_weight, self.cfg.pts_ce_weight)

        visible = visible if self.cfg.visible_mask else np.ones(truth.shape, dtype=bool)
        mask_occ, _ = masked_cross_entropy(voxel_logits, labels, visible.reshape(-1))

        components = {"depth": depth, "seg": seg, "pts": pts["pts"], "mask_occ": mask_occ, "distill": kl.loss}
        details = {"pts_lovasz": pts["pts_lovasz"], "pts_ce": pts["pts_ce"]}
        return LossReport(components, self.cfg.loss_weights, details)

    def coverage(self, camera: CameraModel, products: CameraProducts,
                 mask: SemanticMask) -> Tuple[np.ndarray, np.ndarray]:
        """BEV cells reached by the SDG virtual points and by one point per co-point pixel."""
        features = class_indicator_features(mask, self.cfg.class_count)
        ex, k = camera.extrinsics, camera.intrinsics
        sdg = build_virtual_points(ImageFeatureMap(features, products.depth_logits), products.hypotheses, ex, k)
        single = single_hypothesis_points(features, products.sparse, ex, k)
        return bev_coverage(sdg, self.bev_spec), bev_coverage(single, self.bev_spec)

    @timed_operation("bev_utilization")
    def bev_utilization(self, cameras: Sequence[CameraModel], per_camera: Dict[str, CameraProducts],
                        renders: Dict[str, Tuple[SemanticMask, DepthMap]]) -> Dict[str, Any]:
        """Covered-cell fractions of the BEV grid over all cameras, SDG against single-hypothesis lifting."""
        shape = (self.bev_spec.n_x, self.bev_spec.n_y)
        sdg, single = np.zeros(shape, dtype=bool), np.zeros(shape, dtype=bool)
        for camera in cameras:
            covered_sdg, covered_single = self.coverage(camera, per_camera[camera.name], renders[camera.name][0])
            sdg |= covered_sdg
            single |= covered_single
        cells = sdg.size
        return {
            "cells": cells,
            "sdg": int(sdg.sum()) / cells,
            "single_hypothesis": int(single.sum()) / cells,
        }

    # ------------------------------------------------------------------
    # End-to-end
    # ------------------------------------------------------------------

    def run(self, products: Optional[SceneProducts] = None,
            cameras: Optional[Sequence[CameraModel]] = None) -> RunResult:
        """
        Full fusion run. `cameras` overrides the rig (same names, e.g. with
        perturbed extrinsics); sensor data still comes from the true rig.
        """
        products = products or self.generate()
        cameras = list(cameras) if cameras is not None else list(self.scene.cameras)

        with self.monitor.timed_stage("view_transform", cameras=len(cameras)):
            per_camera = {cam.name: self.camera_products(cam, products) for cam in cameras}
            camera_bev = self.camera_bev([c.bev for c in per_camera.values()])
        with self.monitor.timed_stage("fusion", k=self.cfg.window_k):
            lidar_bev = self.lidar_bev(products.cloud)
            fused = self.fuse(camera_bev, lidar_bev)
        with self.monitor.timed_stage("predict"):
            prediction = self.predict(fused)
            camera_prediction = self.predict(camera_bev)
        with self.monitor.timed_stage("evaluate"):
            metrics = self.evaluate(prediction, products.truth, products.visible)
            camera_metrics = self.evaluate(camera_prediction, products.truth, products.visible)
        with self.monitor.timed_stage("losses"):
            kl = self.distill(camera_bev, lidar_bev)
            losses = self.losses(prediction, products.truth, products.visible, products.cloud,
                                 products.renders, per_camera, kl)

        return RunResult(prediction, camera_prediction, fused, camera_bev, lidar_bev,
                         metrics, camera_metrics, losses, kl, per_camera)


def run_fusion_pipeline(cfg: PipelineConfig, scene: SceneSpec, work_dir: Optional[Path] = None,
                        workers: Optional[int] = None) -> Tuple[OccupancyGrid, Dict[str, Any]]:
    """
    Generate, lift, fuse in cfg.direction, decode and evaluate.

    Returns:
        (predicted occupancy, report). The report holds no timings, so the
        same seed gives the same report regardless of the worker count.
    """
    pipeline = OccupancyPipeline(cfg, scene, workers)
    products = pipeline.generate()
    result = pipeline.run(products)
    utilization = pipeline.bev_utilization(scene.cameras, result.cameras, products.renders)
    report = {"scene": _scene_summary(scene), **result.report(), "bev_utilization": utilization}

    get_logger().log_metrics("fusion run", {
        "binary_iou": result.metrics.binary_iou,
        "miou": result.metrics.miou,
        "camera_binary_iou": result.camera_metrics.binary_iou,
        "camera_miou": result.camera_metrics.miou,
        "total_loss": result.losses.total,
        "bev_utilization_sdg": utilization["sdg"],
        "bev_utilization_single": utilization["single_hypothesis"],
    })
    if work_dir is not None:
        work_dir = Path(work_dir)
        save_tensor(work_dir / "occupancy", result.prediction.labels, "u8")
        save_tensor(work_dir / "fused_bev", result.fused_bev.features, "f64")
        write_occupancy_slices(result.prediction, work_dir / "slices")
        result.metrics.write(work_dir)
        write_json(work_dir / "report.json", report)
        log_success(f"Report written to {work_dir / 'report.json'}")
    return result.prediction, report


def run_kl_path(cfg: PipelineConfig, scene: SceneSpec, camera_bev: Optional[BevFeatureMap] = None,
                work_dir: Optional[Path] = None, workers: Optional[int] = None) -> Tuple[DistillWeightMap, Dict[str, Any]]:
    """
    Distillation path: fuse in cfg.kl_direction, split AR/IR, weight and score.

    camera_bev replaces the lifted camera map (e.g. to check the weighting on a hand-made map).
    """
    pipeline = OccupancyPipeline(cfg, scene, workers)
    products = pipeline.generate()
    if camera_bev is None:
        contributions = [pipeline.camera_products(cam, products).bev for cam in scene.cameras]
        camera_bev = pipeline.camera_bev(contributions)
    lidar_bev = pipeline.lidar_bev(products.cloud)
    with pipeline.monitor.timed_stage("distill", direction=cfg.kl_direction):
        kl = pipeline.distill(camera_bev, lidar_bev)
    report = {"scene": _scene_summary(scene), "direction": cfg.kl_direction, **kl.summary()}

    get_logger().log_metrics("distillation", {k: v for k, v in report.items() if k != "scene"})
    if work_dir is not None:
        _write_kl(Path(work_dir), kl, report)
    return kl.weights, report


def _write_kl(work_dir: Path, kl: KLResult, report: Dict[str, Any]):
    save_tensor(work_dir / "distill_weights", kl.weights.weights, "f64")
    write_weight_pgm(kl.weights, work_dir / "distill_weights.pgm")
    write_json(work_dir / "distill.json", report)


def _delta(value: Optional[float], base: Optional[float]) -> Optional[float]:
    if value is None or base is None:
        return None
    return value - base


def _mean(values: Sequence[Optional[float]]) -> Optional[float]:
    defined = [v for v in values if v is not None]
    return math.fsum(defined) / len(defined) if defined else None


def _worst(values: Sequence[Optional[float]]) -> Optional[float]:
    defined = [v for v in values if v is not None]
    return min(defined) if defined else None


SWEEP_FIELDS = [
    "translation_m", "rotation_deg", "trials",
    "mean_delta_iou", "worst_delta_iou", "mean_delta_miou", "worst_delta_miou",
    "camera_mean_delta_iou", "camera_worst_delta_iou", "camera_mean_delta_miou", "camera_worst_delta_miou",
    "mean_displacement_px",
]


def perturbation_seed(cfg: PipelineConfig, trial: int, camera_index: int) -> int:
    """per_frame draws a new perturbation each trial; per_sequence keeps one for all trials."""
    base = cfg.seed + trial if cfg.perturb_mode == "per_frame" else cfg.seed
    return base * 1000 + camera_index


def run_perturbation_sweep(cfg: PipelineConfig, scene: SceneSpec,
                           magnitudes: Optional[Sequence[Tuple[float, float]]] = None,
                           work_dir: Optional[Path] = None, workers: Optional[int] = None,
                           show_progress: bool = True) -> Dict[str, Any]:
    """
    Re-run the fusion pipeline with perturbed camera extrinsics.

    For every (translation m, rotation deg) pair, cfg.perturb_trials runs
    are compared with the unperturbed run; the report holds mean and worst
    IoU/mIoU deltas (fused and camera-only) and the mean co-point pixel
    displacement.
    """
    magnitudes = [tuple(m) for m in (magnitudes if magnitudes is not None else cfg.sweep)]
    if any(t < 0 or r < 0 for t, r in magnitudes):
        raise ConfigError("perturbation magnitudes must be non-negative", {"magnitudes": magnitudes})

    pipeline = OccupancyPipeline(cfg, scene, workers)
    products = pipeline.generate()
    baseline = pipeline.run(products)
    points = products.cloud.points

    rows: List[Dict[str, Any]] = []
    total = len(magnitudes) * cfg.perturb_trials
    with tqdm(total=total, desc="Perturbation sweep", unit="run", disable=not show_progress) as pbar:
        for translation, rotation in magnitudes:
            deltas: Dict[str, List[Optional[float]]] = {key: [] for key in ("iou", "miou", "cam_iou", "cam_miou")}
            displacements = []
            for trial in range(cfg.perturb_trials):
                cameras = []
                for index, cam in enumerate(scene.cameras):
                    perturbed = perturb_extrinsics(cam.extrinsics, translation, rotation,
                                                   perturbation_seed(cfg, trial, index))
                    cameras.append(cam.with_extrinsics(perturbed))
                    displacements.append(copoint_displacement(points, cam.extrinsics, perturbed, cam.intrinsics))
                result = pipeline.run(products, cameras)
                deltas["iou"].append(_delta(result.metrics.binary_iou, baseline.metrics.binary_iou))
                deltas["miou"].append(_delta(result.metrics.miou, baseline.metrics.miou))
                deltas["cam_iou"].append(_delta(result.camera_metrics.binary_iou, baseline.camera_metrics.binary_iou))
                deltas["cam_miou"].append(_delta(result.camera_metrics.miou, baseline.camera_metrics.miou))
                pbar.update(1)

            rows.append({
                "translation_m": translation,
                "rotation_deg": rotation,
                "trials": cfg.perturb_trials,
                "mean_delta_iou": _mean(deltas["iou"]),
                "worst_delta_iou": _worst(deltas["iou"]),
                "mean_delta_miou": _mean(deltas["miou"]),
                "worst_delta_miou": _worst(deltas["miou"]),
                "camera_mean_delta_iou": _mean(deltas["cam_iou"]),
                "camera_worst_delta_iou": _worst(deltas["cam_iou"]),
                "camera_mean_delta_miou": _mean(deltas["cam_miou"]),
                "camera_worst_delta_miou": _worst(deltas["cam_miou"]),
                "mean_displacement_px": _mean(displacements) or 0.0,
            })
            log_info(f"Perturbation {translation} m / {rotation} deg: "
                     f"mean displacement {rows[-1]['mean_displacement_px']:.3f} px")

    report = {
        "scene": _scene_summary(scene),
        "mode": cfg.perturb_mode,
        "baseline": {
            "binary_iou": baseline.metrics.binary_iou,
            "miou": baseline.metrics.miou,
            "camera_binary_iou": baseline.camera_metrics.binary_iou,
            "camera_miou": baseline.camera_metrics.miou,
        },
        "magnitudes": rows,
    }
    if work_dir is not None:
        work_dir = Path(work_dir)
        write_json(work_dir / "perturbation.json", report)
        write_csv(work_dir / "perturbation.csv", rows, SWEEP_FIELDS)
    return report


ABLATION_FIELDS = [
    "parameter", "range_m", "layers", "window_k",
    "binary_iou", "miou", "camera_binary_iou", "camera_miou",
]


def ablation_settings(cfg: PipelineConfig) -> List[Tuple[str, Dict[str, Any]]]:
    """(range, layers) pairs first, then window sizes; each varies one group from cfg."""
    depth = [("depth", {"range_m": r, "layers": l}) for r, l in cfg.ablation_depth]
    window = [("window", {"window_k": k}) for k in cfg.ablation_windows]
    return depth + window


def run_ablation(cfg: PipelineConfig, scene: SceneSpec, work_dir: Optional[Path] = None,
                 workers: Optional[int] = None, show_progress: bool = True) -> Dict[str, Any]:
    """
    Re-run the fusion pipeline over the discretization (range, layers) grid
    and the attention window sizes. Sensor data is generated once and shared
    by every variant.
    """
    settings = ablation_settings(cfg)
    if not settings:
        raise ConfigError("ablation needs at least one (range, layers) pair or window size")
    products = OccupancyPipeline(cfg, scene, workers).generate()

    rows: List[Dict[str, Any]] = []
    with tqdm(total=len(settings), desc="Ablation", unit="run", disable=not show_progress) as pbar:
        for parameter, overrides in settings:
            variant = cfg.with_overrides(overrides).validate()
            result = OccupancyPipeline(variant, scene, workers).run(products)
            rows.append({
                "parameter": parameter,
                "range_m": variant.range_m,
                "layers": variant.layers,
                "window_k": variant.window_k,
                "binary_iou": result.metrics.binary_iou,
                "miou": result.metrics.miou,
                "camera_binary_iou": result.camera_metrics.binary_iou,
                "camera_miou": result.camera_metrics.miou,
            })
            log_debug(f"Ablation {parameter} {overrides}: mIoU {result.metrics.miou}")
            pbar.update(1)

    report = {
        "scene": _scene_summary(scene),
        "baseline": {"range_m": cfg.range_m, "layers": cfg.layers, "window_k": cfg.window_k},
        "rows": rows,
    }
    if work_dir is not None:
        work_dir = Path(work_dir)
        write_json(work_dir / "ablation.json", report)
        write_csv(work_dir / "ablation.csv", rows, ABLATION_FIELDS)
    return report


def _scene_summary(scene: SceneSpec) -> Dict[str, Any]:
    return {
        "seed": scene.seed,
        "num_classes": scene.num_classes,
        "boxes": len(scene.boxes),
        "cameras": [c.name for c in scene.cameras],
    }


# ----------------------------------------------------------------------
# Work-directory stages
# ----------------------------------------------------------------------

class ArtifactStore:
    """Named stage outputs inside a work directory."""

    def __init__(self, work_dir: Path):
        self.work_dir = Path(work_dir)

    def path(self, name: str) -> Path:
        return self.work_dir / name

    def _require(self, path: Path, producer: str):
        if not path.exists():
            raise DataError(f"Missing artifact {path.name}: run `occ-forge {producer}` first",
                            {"work_dir": str(self.work_dir)})

    def save(self, name: str, array: np.ndarray, dtype: str) -> Path:
        return save_tensor(self.path(name), array, dtype)

    def load(self, name: str, producer: str) -> np.ndarray:
        self._require(self.path(name).with_suffix(".bin"), producer)
        return load_tensor(self.path(name))

    def save_scene(self, scene: SceneSpec) -> Path:
        return scene.save(self.path("scene.json"))

    def load_scene(self) -> SceneSpec:
        self._require(self.path("scene.json"), "generate")
        return SceneSpec.load(self.path("scene.json"))

    def save_cloud(self, cloud: PointCloud) -> Path:
        return save_point_cloud(self.path("lidar.pts"), cloud)

    def load_cloud(self) -> PointCloud:
        self._require(self.path("lidar.pts"), "generate")
        return load_point_cloud(self.path("lidar.pts"))


class StageRunner:
    """
    One CLI subcommand per method. Each stage reads its inputs from the
    work directory and writes its outputs next to them.
    """

    def __init__(self, cfg: PipelineConfig, work_dir: Path, scene: Optional[SceneSpec] = None,
                 workers: Optional[int] = None):
        self.cfg = cfg
        self.store = ArtifactStore(work_dir)
        self.scene = scene or self.store.load_scene()
        self.pipeline = OccupancyPipeline(cfg, self.scene, workers)

    def _mask(self, prefix: str, name: str, producer: str) -> SemanticMask:
        return SemanticMask(self.store.load(f"{prefix}_{name}", producer), self.cfg.num_classes)

    def generate(self, points: Optional[PointCloud] = None) -> Dict[str, Any]:
        """Synthesize the scene; `points` replaces the simulated LiDAR sweep in lidar.pts."""
        n = self.cfg.num_classes
        if points is not None and len(points) and (points.classes.min() < 0 or points.classes.max() >= n):
            raise DataError("point classes must lie in 0..num_classes-1", {"num_classes": self.cfg.num_classes})
        products = self.pipeline.generate()
        cloud = points if points is not None else products.cloud
        self.store.save_scene(self.scene)
        self.store.save_cloud(cloud)
        self.store.save("truth", products.truth.labels, "u8")
        self.store.save("visible", products.visible, "u8")
        for name, (mask, depth) in products.renders.items():
            self.store.save(f"mask_{name}", mask.labels, "u16")
            self.store.save(f"oracle_depth_{name}", depth.values, "f64")
        return {"points": len(cloud), "occupied": int(products.truth.occupied().sum()),
                "visible": int(products.visible.sum())}

    def project(self) -> Dict[str, Any]:
        cloud = self.store.load_cloud()
        counts = {}
        for cam in self.scene.cameras:
            sparse, copoints = self.pipeline.project(cam, cloud)
            self.store.save(f"sparse_depth_{cam.name}", sparse.values, "f64")
            self.store.save(f"copoints_{cam.name}", copoints.labels, "u16")
            counts[cam.name] = int((sparse.values > 0).sum())
        return {"copoints": counts}

    def diffuse(self) -> Dict[str, Any]:
        filled = {}
        for cam in self.scene.cameras:
            sparse = DepthMap(self.store.load(f"sparse_depth_{cam.name}", "project"))
            mask = self._mask("mask", cam.name, "generate")
            extended = self.pipeline.diffuse(sparse, mask)
            self.store.save(f"extended_depth_{cam.name}", extended.values, "f64")
            filled[cam.name] = int((extended.values > 0).sum())
        return {"extended_pixels": filled}

    def lift(self) -> Dict[str, Any]:
        contributions = []
        for cam in self.scene.cameras:
            extended = DepthMap(self.store.load(f"extended_depth_{cam.name}", "diffuse"))
            mask = self._mask("mask", cam.name, "generate")
            oracle = DepthMap(self.store.load(f"oracle_depth_{cam.name}", "generate"))
            contributions.append(self.pipeline.lift(cam, extended, mask, oracle)[2])
        camera_bev = self.pipeline.camera_bev(contributions)
        self.store.save("camera_bev", camera_bev.features, "f64")
        return {"occupied_cells": occupancy_mask(camera_bev).count}

    def fuse(self) -> Dict[str, Any]:
        camera_bev = BevFeatureMap(self.store.load("camera_bev", "lift"))
        lidar_bev = self.pipeline.lidar_bev(self.store.load_cloud())
        fused = self.pipeline.fuse(camera_bev, lidar_bev)
        self.store.save("lidar_bev", lidar_bev.features, "f64")
        self.store.save("fused_bev", fused.features, "f64")
        return {"direction": self.cfg.direction, "occupied_cells": occupancy_mask(fused).count}

    def distill_weights(self) -> Dict[str, Any]:
        camera_bev = BevFeatureMap(self.store.load("camera_bev", "lift"))
        lidar_bev = self.pipeline.lidar_bev(self.store.load_cloud())
        kl = self.pipeline.distill(camera_bev, lidar_bev)
        report = {"direction": self.cfg.kl_direction, **kl.summary()}
        _write_kl(self.store.work_dir, kl, report)
        return report

    def predict(self) -> Dict[str, Any]:
        fused = BevFeatureMap(self.store.load("fused_bev", "fuse"))
        prediction = self.pipeline.predict(fused)
        self.store.save("occupancy", prediction.labels, "u8")
        write_occupancy_slices(prediction, self.store.path("slices"))
        return {"occupied": int(prediction.occupied().sum())}

    def eval(self) -> Dict[str, Any]:
        n = self.cfg.num_classes
        prediction = OccupancyGrid(self.store.load("occupancy", "predict"), n)
        truth = OccupancyGrid(self.store.load("truth", "generate"), n)
        visible = self.store.load("visible", "generate").astype(bool)
        report = self.pipeline.evaluate(prediction, truth, visible)
        report.write(self.store.work_dir)
        losses = self.stored_losses(truth, visible)
        write_json(self.store.path("losses.json"), losses.to_dict())
        return {"binary_iou": report.binary_iou, "miou": report.miou, "voxels": report.confusion.total,
                **{f"loss_{name}": value for name, value in losses.components.items()},
                "total_loss": losses.total}

    def stored_losses(self, truth: OccupancyGrid, visible: np.ndarray) -> LossReport:
        """Loss components recomputed from the artifacts of the earlier stages."""
        cloud = self.store.load_cloud()
        camera_bev = BevFeatureMap(self.store.load("camera_bev", "lift"))
        fused = BevFeatureMap(self.store.load("fused_bev", "fuse"))
        renders: Dict[str, Tuple[SemanticMask, DepthMap]] = {}
        cameras: Dict[str, CameraProducts] = {}
        for cam in self.scene.cameras:
            mask = self._mask("mask", cam.name, "generate")
            oracle = DepthMap(self.store.load(f"oracle_depth_{cam.name}", "generate"))
            sparse = DepthMap(self.store.load(f"sparse_depth_{cam.name}", "project"))
            copoints = self._mask("copoints", cam.name, "project")
            extended = DepthMap(self.store.load(f"extended_depth_{cam.name}", "diffuse"))
            hyps, logits, bev = self.pipeline.lift(cam, extended, mask, oracle)
            renders[cam.name] = (mask, oracle)
            cameras[cam.name] = CameraProducts(cam.name, sparse, copoints, extended, hyps, logits, bev)
        kl = self.pipeline.distill(camera_bev, self.pipeline.lidar_bev(cloud))
        return self.pipeline.losses(self.pipeline.predict(fused), truth, visible, cloud, renders, cameras, kl)

    def perturb(self, show_progress: bool = True) -> Dict[str, Any]:
        report = run_perturbation_sweep(self.cfg, self.scene, work_dir=self.store.work_dir,
                                        workers=self.pipeline.workers, show_progress=show_progress)
        return {"magnitudes": len(report["magnitudes"])}

    def ablate(self, show_progress: bool = True) -> Dict[str, Any]:
        report = run_ablation(self.cfg, self.scene, work_dir=self.store.work_dir,
                              workers=self.pipeline.workers, show_progress=show_progress)
        best = max(report["rows"], key=lambda row: row["miou"] if row["miou"] is not None else -1.0)
        return {"variants": len(report["rows"]), "best_parameter": best["parameter"],
                "best_range_m": best["range_m"], "best_layers": best["layers"], "best_window_k": best["window_k"]}
