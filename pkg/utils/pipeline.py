"""
追蹤 / 建圖管線

功能：
1. 自舉：前 BOOTSTRAP_FRAMES 個影格視為靜態，建立地圖並擬合靜態統計模型
2. 追蹤：只用靜態 Gaussian 的 3D-2D 對應求解位姿（上一影格位姿為初值）
3. 建圖：統計累積 → CRF → 光流恢復 → 時間視窗刪除 → 位姿精修 → 金字塔最佳化 → 修剪 / 加密
4. 評估：ATE、動態標籤 precision / recall、靜態渲染 PSNR / SSIM

追蹤與建圖以兩段式管線交換不可變訊息：影格 k 的建圖與影格 k+1 的追蹤同時進行，
建圖結果在追蹤影格 k+2 之前套用。循序模式依相同順序執行，結果完全相同。
"""

import logging
import time
from collections import deque
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from config import SlamConfig

from .crf_segmentation import (apply_labels, apply_retention, build_problem, mean_field_infer,
                               write_label_dump)
from .dataset_io import FrameRecord, TumSequence
from .errors import InsufficientDataError
from .evaluation import LabelMetrics, evaluate_ate, label_metrics, render_quality
from .flow_verify import verify_and_recover
from .gaussian_map import DYNAMIC, STATIC, FrameObservations, GaussianMap, MapSnapshot
from .geometry import Camera, CameraPose, Trajectory
from .motion_stats import StaticStatModel, collect_bootstrap_stats, fit_static_model, refit_static_model
from .pose_solver import (MIN_CORRESPONDENCES, Correspondence, SolverOptions, correspondences_from_arrays,
                          solve_pose)
from .splat_render import (Keyframe, LearningRates, LossWeights, apply_params, composite,
                           optimize_coarse_to_fine, params_from_map, prune_and_densify,
                           write_loss_trace)

logger = logging.getLogger(__name__)

STAGES = ('accumulate', 'crf', 'flow', 'retention', 'pose_refine', 'optimize', 'prune')


# ===== 輸入 =====

@dataclass
class FrameInput:
    """追蹤與建圖需要的單一影格資料"""
    frame_id: int
    timestamp: float
    rgb: np.ndarray
    gray: np.ndarray
    observations: FrameObservations


@dataclass
class SequenceInput:
    """
    管線輸入序列（模擬或磁碟上的 TUM 目錄）

    Attributes:
        camera: 相機內參
        frame_count: 影格數
        load_frame: 依索引載入影格
        ground_truth: 真實軌跡（可能為 None）
        labels: 真實標籤（可能為 None）
        load_static: 依索引載入純靜態影像（可能為 None）
    """
    camera: Camera
    frame_count: int
    load_frame: Callable[[int], FrameInput]
    ground_truth: Optional[Trajectory] = None
    labels: Optional[Dict[int, int]] = None
    load_static: Optional[Callable[[int], Optional[np.ndarray]]] = None

    def __len__(self) -> int:
        return self.frame_count

    @classmethod
    def from_simulation(cls, sequence) -> 'SequenceInput':
        """由 scene_sim.SimulatedSequence 建立"""
        frames = sequence.frames
        tracks = sequence.ground_truth.tracks

        def load(k: int) -> FrameInput:
            fr = frames[k]
            return FrameInput(fr.frame_id, fr.timestamp, fr.rgb, fr.gray, tracks[k])

        statics = sequence.ground_truth.static_renders
        return cls(sequence.camera, len(frames), load, sequence.ground_truth.poses,
                   dict(sequence.ground_truth.labels),
                   (lambda k: statics[k]) if statics else None)

    @classmethod
    def from_tum(cls, sequence: TumSequence) -> 'SequenceInput':
        """由 dataset_io.TumSequence 建立（影像延遲載入）"""
        def load(k: int) -> FrameInput:
            record = sequence.frames[k]
            rgb = record.load_rgb()
            gray = rgb @ np.array([0.299, 0.587, 0.114])
            return FrameInput(record.index, record.timestamp, rgb, gray, sequence.features[k])

        load_static = None
        if sequence.static_paths:
            def load_static(k: int) -> Optional[np.ndarray]:
                path = sequence.static_paths[k]
                if path is None:
                    return None
                return FrameRecord(k, 0.0, path, path).load_rgb()

        return cls(sequence.camera, len(sequence.frames), load, sequence.ground_truth,
                   sequence.labels, load_static)


# ===== 訊息與報告 =====

@dataclass(frozen=True)
class TrackResult:
    """追蹤送往建圖的訊息"""
    frame_id: int
    pose: CameraPose
    success: bool
    correspondence_ids: Tuple[int, ...]


@dataclass(frozen=True)
class MappingResult:
    """建圖送回追蹤的訊息（在下一個影格邊界套用）"""
    frame_id: int
    refined_pose: Optional[CameraPose]
    dynamic_count: int
    deleted: Tuple[int, ...]
    recovered: Tuple[int, ...]


@dataclass
class RunReport:
    """執行報告"""
    frames: int = 0
    keyframes: int = 0
    tracking_failures: int = 0
    ate_rmse: float = float('nan')
    ate_std: float = float('nan')
    ate_pairs: int = 0
    label_precision: float = float('nan')
    label_recall: float = float('nan')
    false_dynamic_crf: int = 0
    false_dynamic_recovered: int = 0
    recovered_total: int = 0
    deleted_total: int = 0
    render_psnr: float = float('nan')
    render_ssim: float = float('nan')
    map_size: int = 0
    stage_seconds: Dict[str, float] = field(default_factory=lambda: {s: 0.0 for s in STAGES})
    stage_failures: Dict[str, int] = field(default_factory=lambda: {s: 0 for s in STAGES})
    config: Dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, object]:
        """扁平化：stage_seconds.crf、config.CRF_ITERATIONS ..."""
        out: Dict[str, object] = {
            'frames': self.frames,
            'keyframes': self.keyframes,
            'tracking_failures': self.tracking_failures,
            'ate_rmse': self.ate_rmse,
            'ate_std': self.ate_std,
            'ate_pairs': self.ate_pairs,
            'label_precision': self.label_precision,
            'label_recall': self.label_recall,
            'false_dynamic_crf': self.false_dynamic_crf,
            'false_dynamic_recovered': self.false_dynamic_recovered,
            'recovered_total': self.recovered_total,
            'deleted_total': self.deleted_total,
            'render_psnr': self.render_psnr,
            'render_ssim': self.render_ssim,
            'map_size': self.map_size,
        }
        for stage in STAGES:
            out[f'stage_seconds.{stage}'] = float(self.stage_seconds.get(stage, 0.0))
        for stage in STAGES:
            out[f'stage_failures.{stage}'] = int(self.stage_failures.get(stage, 0))
        for key, value in self.config.items():
            out[f'config.{key}'] = ','.join(str(v) for v in value) if isinstance(value, tuple) else value
        return out


@dataclass
class _KeyframeState:
    """上一個關鍵影格（光流恢復使用）"""
    gray: np.ndarray
    pixels: Dict[int, np.ndarray]


# ===== 管線 =====

class SlamPipeline:
    """動態場景 Gaussian SLAM 管線"""

    def __init__(self, cfg: SlamConfig, camera: Camera,
                 truth_labels: Optional[Dict[int, int]] = None,
                 out_dir: Optional[Path] = None):
        """
        Args:
            cfg: 設定
            camera: 相機內參
            truth_labels: 真實標籤（只用於統計誤判數）
            out_dir: 輸出目錄（標籤傾印、損失曲線）
        """
        self.cfg = cfg
        self.camera = camera
        self.truth_labels = truth_labels
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.gmap = GaussianMap(cfg.MAP_WINDOW_SIZE, cfg.MAP_INITIAL_OPACITY, cfg.STATS_OUTLIER_GATE_PX)
        self.model: Optional[StaticStatModel] = None
        self.trajectory = Trajectory()
        self.report = RunReport(config=cfg.to_dict())
        self.snapshot: Optional[MapSnapshot] = None
        self._keyframes: deque = deque(maxlen=cfg.MAPPING_WINDOW_KEYFRAMES)
        self._previous: Optional[_KeyframeState] = None
        self._keyframe_count = 0
        # 只含時間視窗刪除的 id；修剪掉的靜態 Gaussian 不算動態預測
        self.retention_deleted: Set[int] = set()
        self.solver_options = SolverOptions(
            initial_damping=cfg.POSE_INITIAL_DAMPING,
            damping_up=cfg.POSE_DAMPING_FACTOR,
            damping_down=cfg.POSE_DAMPING_FACTOR,
            max_iterations=cfg.POSE_MAX_ITERATIONS,
            update_tolerance=cfg.POSE_UPDATE_TOLERANCE,
            cost_tolerance=cfg.POSE_COST_TOLERANCE,
            robust=cfg.POSE_ROBUST,
            huber_delta=cfg.POSE_HUBER_DELTA,
            outlier_rounds=cfg.POSE_OUTLIER_ROUNDS,
        )

    # ===== 自舉 =====

    def bootstrap(self, frames: Sequence[FrameInput]) -> StaticStatModel:
        """
        以前 BOOTSTRAP_FRAMES 個影格建立地圖

        所有觀測視為靜態：第一個影格位姿為單位矩陣，之後以全部 Gaussian 追蹤，
        連結的觀測累積統計、未連結的觀測插入新 Gaussian，最後擬合靜態模型。

        Raises:
            InsufficientDataError: 影格少於 BOOTSTRAP_FRAMES，或統計樣本不足
        """
        needed = self.cfg.BOOTSTRAP_FRAMES
        if len(frames) < needed:
            raise InsufficientDataError(f'自舉影格不足: 需要 {needed} 個，只有 {len(frames)} 個')

        for k, frame in enumerate(frames[:needed]):
            if k == 0:
                pose = CameraPose.identity(frame.timestamp)
            else:
                track = self.track_frame(frame, self.gmap.snapshot())
                pose = track.pose
            self.trajectory.append(pose)
            self._accumulate(frame.observations, pose)
            self._insert(frame, pose)
            self._previous = _KeyframeState(frame.gray, _observed_pixels(frame.observations))

        stats = collect_bootstrap_stats(self.gmap, self.cfg.STATS_MIN_OBSERVATIONS)
        self.model = fit_static_model(stats, self.cfg.STATS_WEIGHTS, self.cfg.STATS_VARIANCE_FLOOR,
                                      self.cfg.STATS_MIN_SAMPLES)
        self.snapshot = self.gmap.snapshot()
        self.report.frames += needed
        logger.info('自舉完成：%d 個 Gaussian，模型樣本 %d 筆', len(self.gmap), self.model.sample_count)
        return self.model

    # ===== 追蹤 =====

    def track_frame(self, frame: FrameInput, snapshot: MapSnapshot) -> TrackResult:
        """
        以快照中的靜態 Gaussian 求解位姿

        初值為上一影格位姿；對應不足或求解失敗時沿用上一位姿並標記失敗。
        """
        previous = self.trajectory[len(self.trajectory) - 1] if len(self.trajectory) else \
            CameraPose.identity()
        initial = previous.with_timestamp(frame.timestamp)
        ids, points, pixels = [], [], []
        for item in frame.observations.items:
            if not item.valid or item.gaussian_id not in snapshot:
                continue
            view = snapshot[item.gaussian_id]
            if view.label != STATIC:
                continue
            ids.append(item.gaussian_id)
            points.append(view.position)
            pixels.append(item.pixel)

        if len(ids) < MIN_CORRESPONDENCES:
            logger.warning('影格 %d 的靜態對應只有 %d 筆，沿用上一位姿', frame.frame_id, len(ids))
            return TrackResult(frame.frame_id, initial, False, tuple(ids))

        correspondences = correspondences_from_arrays(np.array(points), np.array(pixels),
                                                      self.cfg.POSE_PIXEL_SIGMA)
        result = solve_pose(correspondences, initial, self.camera, self.solver_options)
        if not result.success:
            return TrackResult(frame.frame_id, initial, False, tuple(ids))
        return TrackResult(frame.frame_id, result.pose.with_timestamp(frame.timestamp), True, tuple(ids))

    # ===== 建圖 =====

    def map_keyframe(self, frame: FrameInput, pose: CameraPose) -> MappingResult:
        """
        依序執行建圖各階段

        任何階段失敗只記錄錯誤與次數，該階段維持原狀態，後續階段照常執行。
        """
        self._keyframe_count += 1
        context = {'frame': frame, 'pose': pose, 'refined': None,
                   'deleted': (), 'recovered': (), 'crf_dynamic': set()}

        stages = {
            'accumulate': self._stage_accumulate,
            'crf': self._stage_crf,
            'flow': self._stage_flow,
            'retention': self._stage_retention,
            'pose_refine': self._stage_pose_refine,
            'optimize': self._stage_optimize,
            'prune': self._stage_prune,
        }
        for name in STAGES:
            self._run_stage(name, stages[name], context)

        interval = self.cfg.STATS_REFIT_INTERVAL
        if interval > 0 and self._keyframe_count % interval == 0 and self.model is not None:
            self.model = refit_static_model(self.gmap, self.model, self.cfg.STATS_MIN_OBSERVATIONS,
                                            self.cfg.STATS_VARIANCE_FLOOR, self.cfg.STATS_MIN_SAMPLES)

        self._previous = _KeyframeState(frame.gray, _observed_pixels(frame.observations))
        return MappingResult(frame.frame_id, context['refined'], len(self.gmap.ids(DYNAMIC)),
                             tuple(context['deleted']), tuple(context['recovered']))

    def _run_stage(self, name: str, stage: Callable[[dict], None], context: dict):
        start = time.perf_counter()
        try:
            stage(context)
        except Exception as e:
            self.report.stage_failures[name] += 1
            logger.error('建圖階段 %s 失敗（影格 %d）: %s', name, context['frame'].frame_id, e)
        finally:
            self.report.stage_seconds[name] += time.perf_counter() - start

    def _stage_accumulate(self, context: dict):
        self._accumulate(context['frame'].observations, context['pose'])

    def _stage_crf(self, context: dict):
        if not self.cfg.CRF_ENABLED or self.model is None:
            return
        problem = build_problem(
            self.gmap, self.model, self.cfg.CRF_KERNEL_WEIGHTS,
            self.cfg.CRF_BANDWIDTHS or None, self.cfg.CRF_PAIRWISE_NORMALIZATION,
            self.cfg.STATS_MIN_OBSERVATIONS, self.cfg.STATS_UNARY_EPSILON)
        if len(problem) == 0:
            return
        result = mean_field_infer(problem, self.cfg.CRF_ITERATIONS)
        apply_labels(self.gmap, problem, result)
        context['crf_dynamic'] = set(self.gmap.ids(DYNAMIC))
        self.report.false_dynamic_crf += self._false_dynamic()
        if self.cfg.OUTPUT_LABEL_DUMPS and self.out_dir is not None:
            write_label_dump(self.out_dir / 'labels' / f'{context["frame"].frame_id:06d}.txt',
                             problem, result)

    def _stage_flow(self, context: dict):
        if not (self.cfg.CRF_ENABLED and self.cfg.FLOW_ENABLED):
            return
        try:
            candidates = self.gmap.ids(DYNAMIC)
            if not candidates or self._previous is None:
                return
            result = verify_and_recover(
                self.gmap, candidates, self._previous.pixels, self._previous.gray,
                context['frame'].gray, threshold=self.cfg.FLOW_CHI2_THRESHOLD,
                window=self.cfg.FLOW_WINDOW, levels=self.cfg.FLOW_LEVELS,
                max_iterations=self.cfg.FLOW_MAX_ITERATIONS, epsilon=self.cfg.FLOW_EPSILON,
                max_static_points=self.cfg.FLOW_MAX_STATIC_POINTS,
                floor=self.cfg.FLOW_COVARIANCE_FLOOR)
            context['recovered'] = tuple(result.recovered)
            self.report.recovered_total += len(result.recovered)
        finally:
            if self.cfg.CRF_ENABLED:
                self.report.false_dynamic_recovered += self._false_dynamic()

    def _stage_retention(self, context: dict):
        if not self.cfg.CRF_ENABLED:
            return
        deleted = apply_retention(self.gmap, self.cfg.MAP_WINDOW_SIZE, self.cfg.CRF_DELETE_THRESHOLD)
        context['deleted'] = tuple(deleted)
        self.retention_deleted.update(deleted)
        self.report.deleted_total += len(deleted)

    def _stage_pose_refine(self, context: dict):
        if not self.cfg.POSE_REFINE_AFTER_RECOVERY:
            return
        correspondences = self._static_correspondences(context['frame'].observations)
        if len(correspondences) < MIN_CORRESPONDENCES:
            return
        result = solve_pose(correspondences, context['pose'], self.camera, self.solver_options)
        if result.success:
            context['refined'] = result.pose.with_timestamp(context['frame'].timestamp)

    def _stage_optimize(self, context: dict):
        frame = context['frame']
        pose = context['refined'] or context['pose']
        self._keyframes.append(Keyframe(pose, frame.rgb))
        if not self.cfg.MAPPING_ENABLED or len(self.gmap) == 0:
            return
        params = params_from_map(self.gmap, self.cfg.RENDER_SH_DEGREE)
        weights = LossWeights(self.cfg.LOSS_PHOTOMETRIC_WEIGHT,
                              self.cfg.LOSS_DYNAMIC_WEIGHT if self.cfg.PENALTY_ENABLED else 0.0,
                              self.cfg.LOSS_SSIM_LAMBDA)
        rates = LearningRates(self.cfg.MAPPING_LR_COLOR, self.cfg.MAPPING_LR_OPACITY,
                              self.cfg.MAPPING_LR_POSITION, self.cfg.MAPPING_LR_SCALE,
                              self.cfg.MAPPING_LR_ROTATION, self.cfg.MAPPING_LR_POSITION_DECAY)
        optimized, trace = optimize_coarse_to_fine(
            params, list(self._keyframes), self.camera, self.cfg.RENDER_PYRAMID_LEVELS,
            self.cfg.MAPPING_ITERATIONS, rates, weights, self.cfg.MAPPING_OPTIMIZER,
            dynamic_mask=params.labels == DYNAMIC)
        if not trace.diverged:
            apply_params(self.gmap, optimized)
        if self.cfg.OUTPUT_LOSS_TRACES and self.out_dir is not None:
            write_loss_trace(self.out_dir / 'loss' / f'{frame.frame_id:06d}.csv', trace)

    def _stage_prune(self, context: dict):
        frame = context['frame']
        pose = context['refined'] or context['pose']
        pruned, _ = prune_and_densify(self.gmap, min_opacity=self.cfg.PRUNE_MIN_OPACITY,
                                      max_scale_ratio=self.cfg.PRUNE_MAX_SCALE_RATIO)
        self._insert(frame, pose)
        if pruned:
            logger.debug('影格 %d 修剪 %d 個 Gaussian', frame.frame_id, len(pruned))

    # ===== 共用 =====

    def _accumulate(self, obs: FrameObservations, pose: CameraPose):
        for item in obs.items:
            if item.valid and item.gaussian_id in self.gmap:
                self.gmap.accumulate_observation(item.gaussian_id, item.pixel, item.depth,
                                                 pose, self.camera)

    def _insert(self, frame: FrameInput, pose: CameraPose) -> List[int]:
        """由未連結觀測插入 Gaussian，顏色取自觀測像素"""
        created = self.gmap.insert_from_features(frame.observations, pose, self.camera)
        height, width = frame.rgb.shape[:2]
        for gid in created:
            g = self.gmap.get(gid)
            u, v = g.last_pixel
            row = min(max(int(round(v)), 0), height - 1)
            col = min(max(int(round(u)), 0), width - 1)
            g.color = np.asarray(frame.rgb[row, col], dtype=float).copy()
        return created

    def _static_correspondences(self, obs: FrameObservations) -> List[Correspondence]:
        points, pixels = [], []
        for item in obs.items:
            if not item.valid or item.gaussian_id not in self.gmap:
                continue
            g = self.gmap.get(item.gaussian_id)
            if g.label != STATIC:
                continue
            points.append(g.position)
            pixels.append(item.pixel)
        if not points:
            return []
        return correspondences_from_arrays(np.array(points), np.array(pixels), self.cfg.POSE_PIXEL_SIGMA)

    def _false_dynamic(self) -> int:
        if self.truth_labels is None:
            return 0
        return sum(1 for gid in self.gmap.ids(DYNAMIC) if self.truth_labels.get(gid) == STATIC)

    # ===== 執行 =====

    def run(self, sequence: SequenceInput) -> RunReport:
        """
        執行整個序列並評估

        RUN_CONCURRENT 為 True 時建圖在背景執行緒執行；兩種模式的訊息順序相同。
        """
        if len(sequence) < self.cfg.BOOTSTRAP_FRAMES:
            raise InsufficientDataError(
                f'自舉影格不足: 需要 {self.cfg.BOOTSTRAP_FRAMES} 個，只有 {len(sequence)} 個')
        boot = [sequence.load_frame(k) for k in range(self.cfg.BOOTSTRAP_FRAMES)]
        self.bootstrap(boot)

        executor = ThreadPoolExecutor(max_workers=1) if self.cfg.RUN_CONCURRENT else None
        pending: Optional[Future] = None
        pending_index: Optional[int] = None
        try:
            for k in range(self.cfg.BOOTSTRAP_FRAMES, len(sequence)):
                frame = sequence.load_frame(k)
                track = self.track_frame(frame, self.snapshot)
                self.trajectory.append(track.pose)
                self.report.frames += 1
                if not track.success:
                    self.report.tracking_failures += 1

                # 影格邊界：套用上一個建圖結果並更新快照
                if pending is not None:
                    self._apply_mapping(pending.result(), pending_index)
                    pending = None

                offset = k - self.cfg.BOOTSTRAP_FRAMES
                if offset % self.cfg.MAPPING_KEYFRAME_STRIDE != 0:
                    continue
                self.report.keyframes += 1
                if executor is not None:
                    pending = executor.submit(self.map_keyframe, frame, track.pose)
                else:
                    pending = _completed(self.map_keyframe(frame, track.pose))
                pending_index = len(self.trajectory) - 1

            if pending is not None:
                self._apply_mapping(pending.result(), pending_index)
        finally:
            if executor is not None:
                executor.shutdown(wait=True)

        self.evaluate(sequence)
        return self.report

    def _apply_mapping(self, result: MappingResult, index: int):
        if result.refined_pose is not None:
            self.trajectory.replace(index, result.refined_pose)
        self.snapshot = self.gmap.snapshot()

    def label_metrics(self, truth: Dict[int, int]) -> LabelMetrics:
        """地圖標籤對真實標籤的評估；時間視窗刪除的 Gaussian 視為動態"""
        predicted = {gid: self.gmap.get(gid).label for gid in self.gmap.ids()}
        return label_metrics(predicted, truth, self.retention_deleted)

    def evaluate(self, sequence: SequenceInput) -> RunReport:
        """以真實資料計算 ATE、標籤指標與渲染品質（缺少的項目保留 NaN）"""
        report = self.report
        report.map_size = len(self.gmap)
        if sequence.ground_truth is not None and len(sequence.ground_truth) > 0:
            try:
                ate = evaluate_ate(self.trajectory, sequence.ground_truth, self.cfg.EVAL_MAX_TIME_DIFF)
                report.ate_rmse, report.ate_std, report.ate_pairs = ate.rmse, ate.std, ate.pair_count
            except InsufficientDataError as e:
                logger.warning('無法計算 ATE: %s', e)

        if sequence.labels is not None:
            metrics = self.label_metrics(sequence.labels)
            report.label_precision, report.label_recall = metrics.precision, metrics.recall

        if sequence.load_static is not None and len(self.gmap) > 0:
            params = params_from_map(self.gmap, self.cfg.RENDER_SH_DEGREE)
            static_params = params.subset(params.labels == STATIC)
            pairs = []
            for k, pose in enumerate(self.trajectory):
                target = sequence.load_static(k)
                if target is not None:
                    pairs.append((composite(static_params, pose, self.camera).rgb, target))
            if pairs:
                report.render_psnr, report.render_ssim = render_quality(pairs)
        return report


def _observed_pixels(obs: FrameObservations) -> Dict[int, np.ndarray]:
    return {item.gaussian_id: np.asarray(item.pixel, dtype=float)
            for item in obs.items if item.valid}


def _completed(result: MappingResult) -> Future:
    future: Future = Future()
    future.set_result(result)
    return future


def run_sequence(sequence: SequenceInput, cfg: SlamConfig,
                 out_dir: Optional[Path] = None) -> Tuple[SlamPipeline, RunReport]:
    """建立管線並執行整個序列"""
    pipeline = SlamPipeline(cfg, sequence.camera, sequence.labels, out_dir)
    report = pipeline.run(sequence)
    logger.info('執行完成：ATE RMSE %.4f m，追蹤失敗 %d 次', report.ate_rmse, report.tracking_failures)
    return pipeline, report
