# trainer.py
"""Two-stage training: hierarchical-EMA burn-in and teacher-student mutual learning"""

import json
import logging
import math
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch

from augmentation import apply_augmentation, sample_subclip
from config import Config
from core_model import DatasetSplit, FrameAnnotation, InvalidInputError, NumericError, UsageError, VideoRecord
from detector import GridDetector, ParameterVector, value_and_gradient
from ema_schedules import (EMAEvent, EpochMetrics, ModelState, TSMRController, blend, burn_in_update,
                           epoch_warmup_keep_rate, warmup_keep_rate)
from evaluator import evaluate_model
from losses import (loss_combined, loss_f_sup, loss_v_weak, select_frame_maxima,
                    semi_loss_from_predictions, video_score_tensor)
from pseudo_labels import PseudoLabelSet, PseudoLabelStats, build_pseudo_labels, dump_jsonl

logger = logging.getLogger(__name__)

CURVE_COLUMNS = ['stage', 'epoch', 'loss_sup', 'loss_semi', 'loss_weak', 'loss_total',
                 'map_theta', 'map_iter', 'map_epoch']


def count_truths(videos: Sequence[VideoRecord]) -> int:
    return sum(len(ann.boxes) for video in videos for ann in (video.annotations or ()))


def require_scorable_validation(split: DatasetSplit):
    """Reject a non-empty validation split without ground-truth boxes"""
    if split.validation and count_truths(split.validation) == 0:
        raise UsageError(f"validation split of {len(split.validation)} videos holds no ground-truth boxes; "
                         f"mAP is undefined (generate at least one positive validation video)")


def configure_determinism(num_threads: int = 1):
    """Single-threaded deterministic torch kernels; all randomness comes from seeded numpy generators"""
    torch.set_num_threads(num_threads)
    torch.use_deterministic_algorithms(True)


class RunRecorder:
    """Owns one run directory: curves.csv, schedule.csv and checkpoints"""

    def __init__(self, run_dir: Optional[Union[str, Path]] = None, save_checkpoints: bool = True):
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.save_checkpoints = save_checkpoints
        self.rows: List[Dict] = []
        self.states: Dict[int, ModelState] = {}
        self.last_good: Optional[Path] = None
        if self.run_dir is not None:
            (self.run_dir / 'checkpoints').mkdir(parents=True, exist_ok=True)

    def log_epoch(self, row: Dict):
        self.rows.append(row)
        if self.run_dir is not None:
            self.curves().to_csv(self.run_dir / 'curves.csv', index=False)

    def curves(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=CURVE_COLUMNS)

    def save_state(self, state: ModelState, tag: str) -> Optional[Path]:
        if self.run_dir is None:
            return None
        base = self.run_dir / 'checkpoints' / tag
        for name, vector in state.vectors().items():
            vector.save(base.with_name(f"{tag}.{name}"))
        return base

    def checkpoint(self, state: ModelState, epoch: int):
        self.states[epoch] = state
        if self.save_checkpoints:
            self.save_state(state, f"epoch_{epoch}")
        self.last_good = self.save_state(state, 'last_good')

    def write_config(self, config_dict: Dict):
        if self.run_dir is not None:
            with open(self.run_dir / 'config.json', 'w') as f:
                json.dump(config_dict, f, indent=2, sort_keys=True)


class Trainer:
    """Runs burn-in and mutual learning on one dataset split for one seed"""

    def __init__(self, config: Config, detector: Optional[GridDetector] = None,
                 run_dir: Optional[Union[str, Path]] = None):
        self.config = config
        self.detector = detector or GridDetector(config.detector)
        self.recorder = RunRecorder(run_dir, config.training.save_checkpoints)
        self.controller = TSMRController(config.tsmr)
        self.epochs_completed = 0
        configure_determinism(config.training.num_threads)
        streams = np.random.SeedSequence(config.training.seed).spawn(4)
        self._burn_in_rng = np.random.default_rng(streams[0])
        self._labeled_rng = np.random.default_rng(streams[1])
        self._weak_order_rng = np.random.default_rng(streams[2])
        self._weak_aug_rng = np.random.default_rng(streams[3])
        self.recorder.write_config(config.to_dict())

    # ---------- shared helpers ----------
    def adopt_history(self, rows: Sequence[Dict], states: Dict[int, ModelState]):
        """Continue the curves, checkpoints and epoch count of a burn-in run elsewhere"""
        for epoch in sorted(states):
            self.recorder.checkpoint(states[epoch], epoch)
        for row in rows:
            self.recorder.log_epoch(dict(row))
        self.epochs_completed += len(rows)

    def initial_state(self) -> ModelState:
        return ModelState.initial(self.detector.init_params(self.config.training.seed))

    def evaluate(self, params: ParameterVector, videos: Sequence[VideoRecord]) -> float:
        """mAP of params on videos; 0 for no videos, NaN when they hold no ground-truth boxes"""
        if not videos:
            return 0.0
        if count_truths(videos) == 0:
            logger.warning(f"No ground-truth boxes in {len(videos)} videos; mAP is undefined")
            return float('nan')
        ev = self.config.evaluation
        return evaluate_model(self.detector, params, videos, ev.conf_floor,
                              self.config.detector.nms_iou, ev.iou_threshold)

    def _sgd_step(self, state: ModelState, grad: ParameterVector) -> ModelState:
        cfg = self.config.training
        param = torch.nn.Parameter(state.theta.as_tensor())
        param.grad = grad.as_tensor()
        if cfg.grad_clip_norm > 0:
            torch.nn.utils.clip_grad_norm_([param], cfg.grad_clip_norm)
        # plain SGD keeps no state between steps beyond the step counter
        torch.optim.SGD([param], lr=cfg.learning_rate).step()
        theta = ParameterVector(param.detach().numpy().copy())
        step = state.optimizer_state.get('step', 0) + 1
        return replace(state, theta=theta, optimizer_state={'step': step})

    def _labeled_batch(self, pool, indices, rng) -> Tuple[List[np.ndarray], List[FrameAnnotation]]:
        frames, anns = [], []
        for i in indices:
            frame, ann = apply_augmentation(pool[i][0], pool[i][1], self.config.training.strong_aug, rng)
            frames.append(frame)
            anns.append(ann)
        return frames, anns

    def _step(self, state: ModelState, loss_fn, where: str) -> Tuple[float, ModelState]:
        try:
            loss, grad = value_and_gradient(state.theta, None, loss_fn)
        except NumericError as err:
            checkpoint = str(self.recorder.last_good) if self.recorder.last_good else None
            logger.error(f"Numeric failure {where}; last good checkpoint: {checkpoint}")
            raise NumericError(f"{err} ({where})", checkpoint) from err
        return loss, self._sgd_step(state, grad)

    def _iterations_per_epoch(self, split: DatasetSplit) -> int:
        return math.ceil(split.n_fully_labeled_frames / self.config.training.batch_size)

    # ---------- burn-in ----------
    def run_burn_in(self, split: DatasetSplit, init: Optional[ModelState] = None) -> ModelState:
        """Supervised training on D_f with iteration- and epoch-level EMA"""
        cfg = self.config.training
        tsmr = self.config.tsmr
        weights = self.config.weights
        state = init or self.initial_state()
        if cfg.epochs_burn_in == 0:
            return state
        pool = split.exploded_frames()
        if not pool:
            raise InvalidInputError("burn-in needs a non-empty fully labelled set")
        require_scorable_validation(split)

        n_iter = self._iterations_per_epoch(split)
        rng = self._burn_in_rng
        if self.recorder.last_good is None:
            self.recorder.checkpoint(state, self.epochs_completed)
        logger.info(f"Burn-in: {cfg.epochs_burn_in} epochs x {n_iter} iterations, "
                    f"hierarchical EMA {'on' if cfg.hierarchical_ema else 'off'}")

        for epoch in range(1, cfg.epochs_burn_in + 1):
            order = rng.permutation(len(pool))
            losses = []
            for it in range(n_iter):
                idx = order[it * cfg.batch_size:(it + 1) * cfg.batch_size]
                frames, anns = self._labeled_batch(pool, idx, rng)

                def loss_fn(theta, _):
                    return loss_f_sup(theta, frames, anns, weights, self.detector)

                loss, state = self._step(state, loss_fn, f"in burn-in epoch {epoch} iteration {it}")
                losses.append(loss)

                if cfg.hierarchical_ema:
                    alpha_i = tsmr.alpha_i
                    if cfg.ema_warmup:
                        alpha_i = warmup_keep_rate(alpha_i, state.optimizer_state['step'] - 1)
                else:
                    alpha_i = 0.0
                state = burn_in_update(state, alpha_i, tsmr.alpha_e_fixed, EMAEvent.ITERATION)

            if cfg.hierarchical_ema:
                alpha_e = tsmr.alpha_e_fixed
                if cfg.ema_warmup:
                    alpha_e = epoch_warmup_keep_rate(alpha_e, epoch - 1)
            else:
                alpha_e = 0.0
            state = burn_in_update(state, tsmr.alpha_i, alpha_e, EMAEvent.EPOCH)

            self.epochs_completed += 1
            row = {
                'stage': 'burn_in',
                'epoch': self.epochs_completed,
                'loss_sup': float(np.mean(losses)),
                'loss_semi': 0.0,
                'loss_weak': 0.0,
                'loss_total': float(np.mean(losses)),
                'map_theta': self.evaluate(state.theta, split.validation),
                'map_iter': self.evaluate(state.theta_iter, split.validation),
                'map_epoch': self.evaluate(state.theta_epoch, split.validation),
            }
            self.recorder.log_epoch(row)
            self.recorder.checkpoint(state, self.epochs_completed)
            logger.info(f"Burn-in epoch {epoch}/{cfg.epochs_burn_in}: loss={row['loss_sup']:.4f} "
                        f"mAP theta={row['map_theta']:.4f} theta_I={row['map_iter']:.4f} "
                        f"theta_E={row['map_epoch']:.4f}")
        return state

    # ---------- mutual learning ----------
    def _weak_video_stream(self, videos: Sequence[VideoRecord]):
        """Endless reshuffled pass over D_w"""
        while True:
            for i in self._weak_order_rng.permutation(len(videos)):
                yield videos[i]

    def _pseudo_labelled_clip(self, video: VideoRecord, teacher: ParameterVector, cache: Dict,
                              stats: PseudoLabelStats) -> Tuple[List[np.ndarray], PseudoLabelSet]:
        """Teacher labels on T_r frames, then T_s applied to frames and labels alike"""
        cfg = self.config.training
        clip = sample_subclip(video, cfg.frames_per_video)
        reduced = [apply_augmentation(f, None, cfg.reduced_aug, self._weak_aug_rng)[0] for f in clip]
        if video.video_id in cache:
            labels, video_stats = cache[video.video_id]
            stats.cache_hits += 1
        else:
            video_stats = PseudoLabelStats()
            labels = build_pseudo_labels(teacher, reduced, self._usable_label(video), self.config.pseudo,
                                         self.detector, self.config.detector.nms_iou, video_stats)
            if cfg.reduced_aug.is_identity:
                cache[video.video_id] = (labels, video_stats)
        stats.merge(video_stats)

        frames, frame_labels = [], []
        for frame, targets, frame_pseudo in zip(reduced, labels.to_annotations(), labels.frames):
            aug_frame, aug_targets = apply_augmentation(frame, targets, cfg.strong_aug, self._weak_aug_rng)
            frames.append(aug_frame)
            frame_labels.append(tuple(replace(label, box=box)
                                      for label, box in zip(frame_pseudo, aug_targets.boxes)))
        return frames, PseudoLabelSet(tuple(frame_labels))

    def _usable_label(self, video: VideoRecord) -> Optional[int]:
        """Video label when this configuration consumes labels at all"""
        uses_labels = self.config.pseudo.use_weak_filtering or self.config.weights.lambda_v_weak > 0
        return video.video_label if uses_labels else None

    def run_mutual_learning(self, split: DatasetSplit, init: ModelState) -> ModelState:
        """Student trained on supervised, pseudo-label and video-label losses with iteration EMA;
        teacher and student exchange weights at every epoch end"""
        cfg = self.config.training
        weights = self.config.weights
        soft = self.config.pseudo.use_soft_weights
        weak_threshold = self.config.evaluation.weak_conf_threshold
        start = init.theta_epoch
        state = ModelState(start, start, start, {'step': 0})
        if cfg.epochs_mutual == 0:
            return state
        pool = split.exploded_frames()
        if not pool:
            raise InvalidInputError("mutual learning needs a non-empty fully labelled set")
        require_scorable_validation(split)

        use_weak_data = bool(split.weakly_labeled) and (weights.lambda_f_semi > 0 or weights.lambda_v_weak > 0)
        if not split.weakly_labeled:
            logger.warning("Weakly labelled set is empty; mutual learning reduces to supervised training")
        weak_stream = self._weak_video_stream(split.weakly_labeled) if use_weak_data else None
        n_iter = self._iterations_per_epoch(split)
        if self.recorder.last_good is None:
            self.recorder.checkpoint(state, self.epochs_completed)
        logger.info(f"Mutual learning: {cfg.epochs_mutual} epochs x {n_iter} iterations, "
                    f"{len(split.weakly_labeled)} weak videos")

        for epoch in range(1, cfg.epochs_mutual + 1):
            teacher = state.theta_epoch
            order = self._labeled_rng.permutation(len(pool))
            cache: Dict[str, Tuple[PseudoLabelSet, PseudoLabelStats]] = {}
            stats = PseudoLabelStats()
            sums = {'sup': [], 'semi': [], 'weak': [], 'total': []}
            dumped = []

            for it in range(n_iter):
                idx = order[it * cfg.batch_size:(it + 1) * cfg.batch_size]
                frames, anns = self._labeled_batch(pool, idx, self._labeled_rng)

                weak_frames: List[np.ndarray] = []
                pseudo_sets: List[PseudoLabelSet] = []
                weak_targets: List[Tuple[int, int, List[Optional[int]], int]] = []
                if use_weak_data:
                    for _ in range(cfg.weak_videos_per_batch):
                        video = next(weak_stream)
                        clip, labels = self._pseudo_labelled_clip(video, teacher, cache, stats)
                        offset = len(weak_frames)
                        weak_frames.extend(clip)
                        pseudo_sets.append(labels)
                        dumped.append((video.video_id, labels))
                        label = self._usable_label(video)
                        if weights.lambda_v_weak > 0 and label is not None:
                            dets = self.detector.detect_batch(state.theta, clip, weak_threshold)
                            weak_targets.append((offset, len(clip), select_frame_maxima(dets), label))

                parts: Dict[str, float] = {}

                def loss_fn(theta, _):
                    l_sup = loss_f_sup(theta, frames, anns, weights, self.detector)
                    l_semi = torch.zeros((), dtype=torch.float64)
                    l_weak = torch.zeros((), dtype=torch.float64)
                    if weak_frames:
                        preds = self.detector.forward_batch(theta, weak_frames)
                        if weights.lambda_f_semi > 0:
                            l_semi = semi_loss_from_predictions(preds, pseudo_sets, weights, soft)
                        if weak_targets:
                            scores = [video_score_tensor(preds[o:o + n], sel) for o, n, sel, _ in weak_targets]
                            l_weak = loss_v_weak(scores, [z for _, _, _, z in weak_targets])
                    parts.update(sup=float(l_sup.detach()), semi=float(l_semi.detach()),
                                 weak=float(l_weak.detach()))
                    return loss_combined(l_sup, l_semi, l_weak, weights)

                loss, state = self._step(state, loss_fn, f"in mutual epoch {epoch} iteration {it}")
                for key in ('sup', 'semi', 'weak'):
                    sums[key].append(parts[key])
                sums['total'].append(loss)
                state = replace(state, theta_iter=blend(state.theta_iter, state.theta, self.config.tsmr.alpha_i))

            logger.info(f"Mutual epoch {epoch}: pseudo-labels kept={stats.kept} "
                        f"removed(negative)={stats.removed_negative} rescued={stats.rescued} "
                        f"over {stats.videos} clips ({stats.cache_hits} from cache)")
            if cfg.dump_pseudo_labels and self.recorder.run_dir is not None:
                dump_jsonl(self.recorder.run_dir / 'pseudo_labels.jsonl', dumped, self.epochs_completed + 1)

            metrics = EpochMetrics(m_T=self.evaluate(state.theta_epoch, split.validation),
                                   m_S=self.evaluate(state.theta_iter, split.validation))
            map_theta = self.evaluate(state.theta, split.validation)
            self.epochs_completed += 1
            state = self.controller.step(state, metrics, self.epochs_completed)

            self.recorder.log_epoch({
                'stage': 'mutual',
                'epoch': self.epochs_completed,
                'loss_sup': float(np.mean(sums['sup'])),
                'loss_semi': float(np.mean(sums['semi'])),
                'loss_weak': float(np.mean(sums['weak'])),
                'loss_total': float(np.mean(sums['total'])),
                'map_theta': map_theta,
                'map_iter': metrics.m_S,
                'map_epoch': metrics.m_T,
            })
            if self.recorder.run_dir is not None:
                self.controller.write_csv(self.recorder.run_dir / 'schedule.csv')
            self.recorder.checkpoint(state, self.epochs_completed)
        return state
