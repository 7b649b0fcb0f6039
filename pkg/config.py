# config.py
"""Configuration management for the weakly semi-supervised video detector"""

from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Tuple


@dataclass
class DetectorConfig:
    """Grid detector architecture"""
    image_size: int = 64
    grid_size: int = 8
    channels: Tuple[int, int, int] = (12, 16, 16)
    pool_factors: Tuple[int, int] = (4, 2)  # product must equal image_size / grid_size
    box_prior: float = 0.2  # width/height prior, normalized
    init_scale: float = 0.1
    nms_iou: float = 0.45

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.pool_factors = tuple(self.pool_factors)
        if self.image_size % self.grid_size != 0:
            raise ValueError("image_size must be divisible by grid_size")
        cell = self.image_size // self.grid_size
        if self.pool_factors[0] * self.pool_factors[1] != cell:
            raise ValueError(f"pool factors {self.pool_factors} do not reduce to cell size {cell}")


@dataclass
class LossWeights:
    """Weights of the detection, semi-supervised and weak losses"""
    lambda_coord: float = 0.05
    lambda_conf: float = 1.0
    lambda_f_sup: float = 1.0
    lambda_f_semi: float = 1.0
    lambda_v_weak: float = 0.05

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be nonnegative")


@dataclass
class PseudoLabelConfig:
    """Teacher pseudo-label thresholds and re-weighting switches"""
    beta: float = 0.5
    beta_l: float = 0.1
    use_weak_filtering: bool = False
    use_soft_weights: bool = False

    def __post_init__(self):
        if not (0.0 <= self.beta_l <= self.beta <= 1.0):
            raise ValueError(f"need 0 <= beta_l <= beta <= 1, got beta={self.beta}, beta_l={self.beta_l}")

    @property
    def candidate_threshold(self) -> float:
        """Lowest confidence a teacher detection needs to be considered at all"""
        return self.beta_l if self.use_weak_filtering else self.beta


@dataclass
class TSMRConfig:
    """Keep rates of the hierarchical and adaptive EMA schedules"""
    alpha_i: float = 0.99
    alpha_e_fixed: float = 0.95
    alpha_e_min: float = 0.75
    alpha_e_max: float = 0.99
    alpha_inv_min: float = 0.85
    tau0: float = 180.0
    tau1: float = 3.0
    tau2: float = 180.0
    adaptive: bool = True

    def __post_init__(self):
        if not self.alpha_e_min < self.alpha_e_max:
            raise ValueError("alpha_e_min must be below alpha_e_max")


@dataclass
class AugmentationSpec:
    """Flip / photometric jitter / noise; all zeros is the identity"""
    flip_prob: float = 0.0
    brightness: float = 0.0  # additive shift drawn from [-brightness, brightness]
    contrast: float = 0.0  # gain drawn from [1 - contrast, 1 + contrast]
    noise_sigma: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must lie in [0, 1]")

    @property
    def is_identity(self) -> bool:
        return self.flip_prob == 0 and self.brightness == 0 and self.contrast == 0 and self.noise_sigma == 0


def _strong_augmentation() -> AugmentationSpec:
    return AugmentationSpec(flip_prob=0.5, brightness=0.2, contrast=0.2, noise_sigma=0.02)


@dataclass
class TrainingConfig:
    """Two-stage training protocol"""
    frames_per_video: int = 8  # N_fpv
    epochs_burn_in: int = 20
    epochs_mutual: int = 10
    batch_size: int = 16
    weak_videos_per_batch: int = 2
    learning_rate: float = 0.05
    grad_clip_norm: float = 10.0  # 0 disables
    seed: int = 0
    hierarchical_ema: bool = True
    ema_warmup: bool = True
    num_threads: int = 1
    save_checkpoints: bool = True
    dump_pseudo_labels: bool = False
    strong_aug: AugmentationSpec = field(default_factory=_strong_augmentation)
    reduced_aug: AugmentationSpec = field(default_factory=AugmentationSpec)

    def __post_init__(self):
        if isinstance(self.strong_aug, dict):
            self.strong_aug = AugmentationSpec(**self.strong_aug)
        if isinstance(self.reduced_aug, dict):
            self.reduced_aug = AugmentationSpec(**self.reduced_aug)
        if self.frames_per_video < 1:
            raise ValueError("frames_per_video must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class EvaluationConfig:
    """mAP evaluation settings"""
    conf_floor: float = 0.001
    iou_threshold: float = 0.5
    weak_conf_threshold: float = 0.001  # student detections considered for video scores


@dataclass
class GeneratorConfig:
    """Synthetic lung-like video generator"""
    image_size: int = 64
    n_fully_labeled: int = 40
    n_weak: int = 200
    n_validation: int = 30
    n_test: int = 50
    frames_per_video: int = 30  # T
    positive_fraction: float = 0.5
    min_visible_fraction: float = 0.6
    target_sigma_range: Tuple[float, float] = (2.0, 4.0)  # pixels
    target_contrast_range: Tuple[float, float] = (0.35, 0.6)
    distractor_density: float = 1.5  # mean distractors per video
    drift_speed: float = 0.6  # pixels per frame
    jitter: float = 0.3  # pixels per frame
    speckle_level: float = 0.12
    seed: int = 1234

    def __post_init__(self):
        self.target_sigma_range = tuple(self.target_sigma_range)
        self.target_contrast_range = tuple(self.target_contrast_range)
        counts = (self.n_fully_labeled, self.n_weak, self.n_validation, self.n_test)
        if min(counts) < 0:
            raise ValueError("split counts must be nonnegative")
        if self.frames_per_video < 1:
            raise ValueError("frames_per_video must be >= 1")


@dataclass
class ExperimentConfig:
    """Experiment plan defaults"""
    variant: str = "+weak+pseudo+tsmr"
    repeats: int = 5
    seeds: List[int] = field(default_factory=list)  # empty: 0..repeats-1
    label_fraction: float = 1.0
    output_dir: str = "./runs"
    data_dir: str = "./data"
    beta_grid: List[float] = field(default_factory=lambda: [0.1, 0.3, 0.5, 0.7])
    alpha_e_grid: List[float] = field(default_factory=lambda: [0.9, 0.95, 0.99])
    fraction_grid: List[float] = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])

    def resolved_seeds(self) -> List[int]:
        return list(self.seeds) if self.seeds else list(range(self.repeats))


@dataclass
class Config:
    """Master configuration"""
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    pseudo: PseudoLabelConfig = field(default_factory=PseudoLabelConfig)
    tsmr: TSMRConfig = field(default_factory=TSMRConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    # Logging
    log_level: str = "INFO"
    log_file: Optional[str] = None

    @classmethod
    def from_dict(cls, config_dict: Dict) -> 'Config':
        """Create config from dictionary"""
        return cls(
            detector=DetectorConfig(**config_dict.get('detector', {})),
            weights=LossWeights(**config_dict.get('weights', {})),
            pseudo=PseudoLabelConfig(**config_dict.get('pseudo', {})),
            tsmr=TSMRConfig(**config_dict.get('tsmr', {})),
            training=TrainingConfig(**config_dict.get('training', {})),
            evaluation=EvaluationConfig(**config_dict.get('evaluation', {})),
            generator=GeneratorConfig(**config_dict.get('generator', {})),
            experiment=ExperimentConfig(**config_dict.get('experiment', {})),
            log_level=config_dict.get('log_level', 'INFO'),
            log_file=config_dict.get('log_file'),
        )

    def to_dict(self) -> Dict:
        """Convert config to a JSON/YAML friendly dictionary"""
        data = asdict(self)
        return _untuple(data)


def _untuple(value):
    if isinstance(value, dict):
        return {k: _untuple(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_untuple(v) for v in value]
    return value


def merge_overrides(config_dict: Dict, overrides: Dict[str, Dict]) -> Dict:
    """Apply section-level overrides (e.g. from CLI flags) on top of a config dict"""
    merged = {k: (dict(v) if isinstance(v, dict) else v) for k, v in config_dict.items()}
    for section, values in overrides.items():
        if not values:
            continue
        target = merged.setdefault(section, {})
        for key, value in values.items():
            if value is not None:
                target[key] = value
    return merged


# Default configuration
DEFAULT_CONFIG = Config()
