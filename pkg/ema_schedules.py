# ema_schedules.py
"""Parameter blending, hierarchical burn-in EMA and the adaptive teacher-student keep rates"""

import logging
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import expit

from config import TSMRConfig
from core_model import InvalidInputError
from detector import ParameterVector

logger = logging.getLogger(__name__)


class EMAEvent(str, Enum):
    ITERATION = 'iteration'
    EPOCH = 'epoch'


@dataclass(frozen=True)
class EpochMetrics:
    """Validation mAP of teacher (m_T) and student (m_S)"""
    m_T: float
    m_S: float

    def __post_init__(self):
        if not (0.0 <= self.m_T <= 1.0 and 0.0 <= self.m_S <= 1.0):
            raise InvalidInputError(f"metrics must lie in [0,1]: m_T={self.m_T}, m_S={self.m_S}")

    @property
    def gap(self) -> float:
        return self.m_T - self.m_S


@dataclass(frozen=True)
class ModelState:
    """Raw backprop weights plus the iteration-level and epoch-level averages.

    Burn-in: theta_iter is theta_I and theta_epoch is theta_E.
    Mutual learning: theta_iter is the student theta_S and theta_epoch the teacher theta_T.
    """
    theta: ParameterVector
    theta_iter: ParameterVector
    theta_epoch: ParameterVector
    optimizer_state: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.theta)
        if len(self.theta_iter) != n or len(self.theta_epoch) != n:
            raise InvalidInputError("all parameter vectors of a model state must have equal length")

    @classmethod
    def initial(cls, params: ParameterVector) -> 'ModelState':
        return cls(params, params, params, {'step': 0})

    def vectors(self) -> Dict[str, ParameterVector]:
        return {'theta': self.theta, 'theta_iter': self.theta_iter, 'theta_epoch': self.theta_epoch}


def blend(prev: ParameterVector, new: ParameterVector, alpha: float) -> ParameterVector:
    """alpha * prev + (1 - alpha) * new"""
    if len(prev) != len(new):
        raise InvalidInputError(f"cannot blend vectors of length {len(prev)} and {len(new)}")
    if not 0.0 <= alpha <= 1.0:
        raise InvalidInputError(f"keep rate outside [0,1]: {alpha}")
    if alpha == 1.0:
        return prev
    if alpha == 0.0:
        return new
    return ParameterVector(alpha * prev.values + (1.0 - alpha) * new.values)


def warmup_keep_rate(alpha: float, n_updates: int) -> float:
    """Keep rate ramped as min(alpha, 1 - 1/(n+1))"""
    return min(alpha, 1.0 - 1.0 / (n_updates + 1))


def epoch_warmup_keep_rate(alpha: float, n_updates: int) -> float:
    """Keep rate ramped as min(alpha, (1+n)/(10+n)); forgets early epochs faster than the uniform ramp"""
    return min(alpha, (1.0 + n_updates) / (10.0 + n_updates))


def adaptive_alpha_e(m: EpochMetrics, cfg: TSMRConfig) -> float:
    """Sigmoid in the teacher-student gap, ranging over (alpha_e_min, alpha_e_max)"""
    s = expit(cfg.tau0 * (m.m_T - m.m_S) + cfg.tau1)
    return float(cfg.alpha_e_min + (cfg.alpha_e_max - cfg.alpha_e_min) * s)


def inverse_alpha(m: EpochMetrics, cfg: TSMRConfig) -> float:
    """1 while the student keeps up; falls toward alpha_inv_min as the teacher pulls ahead"""
    if m.m_T <= m.m_S:
        return 1.0
    s = expit(cfg.tau2 * (m.m_S - m.m_T))
    return float(cfg.alpha_inv_min + (2.0 - 2.0 * cfg.alpha_inv_min) * s)


def burn_in_update(state: ModelState, alpha_i: float, alpha_e: float, event: EMAEvent) -> ModelState:
    event = EMAEvent(event)
    if event is EMAEvent.ITERATION:
        return replace(state, theta_iter=blend(state.theta_iter, state.theta, alpha_i))
    return replace(state, theta_epoch=blend(state.theta_epoch, state.theta_iter, alpha_e))


def tsmr_rates(m: EpochMetrics, cfg: TSMRConfig) -> Tuple[float, float]:
    """(alpha_e, alpha_inv) for one epoch; the fixed-rate mode never transfers backwards"""
    if not cfg.adaptive:
        return cfg.alpha_e_fixed, 1.0
    return adaptive_alpha_e(m, cfg), inverse_alpha(m, cfg)


def apply_transfer(state: ModelState, alpha_e: float, alpha_inv: float) -> ModelState:
    """Student -> teacher, then teacher -> student (and raw weights) with the updated teacher"""
    teacher = blend(state.theta_epoch, state.theta_iter, alpha_e)
    student = blend(state.theta_iter, teacher, alpha_inv)
    raw = blend(state.theta, teacher, alpha_inv)
    return replace(state, theta=raw, theta_iter=student, theta_epoch=teacher)


def tsmr_step(state: ModelState, m: EpochMetrics, cfg: TSMRConfig) -> ModelState:
    alpha_e, alpha_inv = tsmr_rates(m, cfg)
    return apply_transfer(state, alpha_e, alpha_inv)


@dataclass(frozen=True)
class ScheduleEntry:
    epoch: int
    m_T: float
    m_S: float
    alpha_e: float
    alpha_inv: float


class TSMRController:
    """Applies the per-epoch transfer and keeps the schedule log"""

    def __init__(self, config: TSMRConfig):
        self.config = config
        self.history: List[ScheduleEntry] = []

    def step(self, state: ModelState, metrics: EpochMetrics, epoch: int) -> ModelState:
        alpha_e, alpha_inv = tsmr_rates(metrics, self.config)
        self.history.append(ScheduleEntry(epoch, metrics.m_T, metrics.m_S, alpha_e, alpha_inv))
        logger.info(f"Epoch {epoch}: m_T={metrics.m_T:.4f} m_S={metrics.m_S:.4f} "
                    f"alpha_e={alpha_e:.4f} alpha_inv={alpha_inv:.4f}")
        return apply_transfer(state, alpha_e, alpha_inv)

    def to_frame(self) -> pd.DataFrame:
        columns = ['epoch', 'm_T', 'm_S', 'alpha_e', 'alpha_inv']
        return pd.DataFrame([asdict(e) for e in self.history], columns=columns)

    def write_csv(self, path: Union[str, Path]):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False)
