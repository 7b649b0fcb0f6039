# utils.py
"""Utility functions and helpers"""

import pandas as pd
import numpy as np
import logging
import json
import math
import yaml
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union
import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import seaborn as sns

from core_model import UsageError

logger = logging.getLogger(__name__)

CURVE_METRICS = {
    'map_epoch': 'teacher (theta_E / theta_T)',
    'map_iter': 'student (theta_I / theta_S)',
}


def setup_logging(log_level: str = "INFO", log_file: Optional[str] = None):
    """Setup logging configuration"""
    handlers = [logging.StreamHandler()]

    if log_file:
        handlers.append(logging.FileHandler(log_file))

    logging.basicConfig(
        level=getattr(logging, log_level.upper()),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True,
    )


def load_config(config_path: Union[str, Path]) -> Dict:
    """Load configuration from YAML or JSON file"""
    config_path = Path(config_path)

    if not config_path.exists():
        raise FileNotFoundError(f"Config file not found: {config_path}")

    with open(config_path, 'r') as f:
        if config_path.suffix in ('.yaml', '.yml'):
            return yaml.safe_load(f) or {}
        elif config_path.suffix == '.json':
            return json.load(f)
        else:
            raise UsageError(f"Unsupported config format: {config_path.suffix}")


def json_serializer(obj):
    """Fallback encoder for numpy and pandas values"""
    if isinstance(obj, np.integer):
        return int(obj)
    elif isinstance(obj, np.floating):
        return float(obj)
    elif isinstance(obj, np.ndarray):
        return obj.tolist()
    elif isinstance(obj, (pd.DataFrame, pd.Series)):
        return obj.to_dict()
    elif isinstance(obj, Path):
        return str(obj)
    return str(obj)


def save_results(results: Dict, output_path: Union[str, Path]):
    """Save a results dictionary as JSON"""
    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    with open(output_path, 'w') as f:
        json.dump(results, f, indent=2, default=json_serializer)
    logger.info(f"Results saved to {output_path}")


def load_curves(run_dirs: Sequence[Union[str, Path]]) -> pd.DataFrame:
    """Stack curves.csv of several runs, tagged by run"""
    frames = []
    for run_dir in run_dirs:
        path = Path(run_dir) / 'curves.csv'
        if not path.exists():
            raise FileNotFoundError(f"No curves.csv in {run_dir}")
        try:
            curves = pd.read_csv(path)
        except pd.errors.EmptyDataError:
            raise UsageError(f"{path} is empty")
        if curves.empty:
            raise UsageError(f"{path} is empty")
        curves['run'] = str(run_dir)
        frames.append(curves)
    if not frames:
        raise UsageError("no run directories given")
    return pd.concat(frames, ignore_index=True)


def confidence_band(curves: pd.DataFrame, metric: str) -> pd.DataFrame:
    """Per-epoch mean and 95% CI half-width (1.96 * std / sqrt(n)) across runs"""
    grouped = curves.groupby('epoch')[metric]
    band = pd.DataFrame({
        'mean': grouped.mean(),
        'std': grouped.std(ddof=1),
        'n': grouped.count(),
    })
    band['half_width'] = 1.96 * band['std'].fillna(0.0) / np.sqrt(band['n'])
    band.loc[band['n'] < 2, 'half_width'] = 0.0
    return band


def plot_learning_curves(curves: pd.DataFrame, save_path: Optional[Union[str, Path]] = None):
    """Validation mAP of teacher and student over epochs, with CI bands when several seeds exist"""
    n_runs = curves['run'].nunique() if 'run' in curves else 1
    if n_runs < 2:
        logger.warning(f"Only {n_runs} run(s); plotting without confidence bands")

    sns.set_style('whitegrid')
    fig, ax = plt.subplots(figsize=(10, 6))
    palette = sns.color_palette(n_colors=len(CURVE_METRICS))
    for color, (metric, label) in zip(palette, CURVE_METRICS.items()):
        band = confidence_band(curves, metric)
        ax.plot(band.index, band['mean'], color=color, label=label)
        if n_runs >= 2:
            ax.fill_between(band.index, band['mean'] - band['half_width'],
                            band['mean'] + band['half_width'], color=color, alpha=0.25)

    burn_in = curves[curves['stage'] == 'burn_in']['epoch']
    if not burn_in.empty and (curves['stage'] == 'mutual').any():
        ax.axvline(burn_in.max() + 0.5, color='gray', linestyle='--', linewidth=1)
    ax.set_title('Validation mAP')
    ax.set_xlabel('Epoch')
    ax.set_ylabel('mAP@0.5')
    ax.legend()

    plt.tight_layout()
    if save_path:
        plt.savefig(save_path, dpi=150, bbox_inches='tight')
        logger.info(f"Plot saved to {save_path}")
    plt.close(fig)
    return fig


def plot_fraction_curve(ablation: pd.DataFrame, save_path: Optional[Union[str, Path]] = None):
    """Mean test mAP (+- std) against the share of weak videos that keep their label"""
    rows = ablation[ablation['group'] == 'fraction'].sort_values('label_fraction')
    if rows.empty:
        raise UsageError("ablation table has no fraction sweep rows")

    sns.set_style('whitegrid')
    fig, ax = plt.subplots(figsize=(8, 5))
    ax.errorbar(rows['label_fraction'], rows['test_mean'], yerr=rows['test_std'].fillna(0.0),
                marker='o', capsize=4)
    ax.set_title('Test mAP vs. video-label fraction')
    ax.set_xlabel('Fraction of weak videos with a video label')
    ax.set_ylabel('mAP@0.5')

    plt.tight_layout()
    if save_path:
        plt.savefig(save_path, dpi=150, bbox_inches='tight')
        logger.info(f"Plot saved to {save_path}")
    plt.close(fig)
    return fig


def format_map(summary: Dict) -> str:
    """'mean ± std' for a summarize() dict"""
    mean, std = summary.get('mean'), summary.get('std')
    if mean is None or (isinstance(mean, float) and math.isnan(mean)):
        return 'N/A'
    return f"{mean:.4f} ± {std:.4f}"
