# experiments.py
"""Named training variants, repeated-seed plans and the ablation grids"""

import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import stats

from config import Config, merge_overrides
from core_model import DatasetSplit, UsageError
from detector import GridDetector
from ema_schedules import ModelState
from trainer import Trainer
from utils import save_results

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class VariantFlags:
    hierarchical_ema: bool
    mutual_learning: bool
    video_labels: bool
    weak_filtering: bool
    soft_weights: bool
    adaptive_tsmr: bool


# Rows of the ablation table, from the plain detector up to the full method
VARIANT_FLAGS: Dict[str, VariantFlags] = {
    'full': VariantFlags(False, False, False, False, False, False),
    'full+he': VariantFlags(True, False, False, False, False, False),
    '+unlabeled': VariantFlags(True, True, False, False, False, False),
    '+weak': VariantFlags(True, True, True, False, False, False),
    '+weak+pseudo': VariantFlags(True, True, True, True, True, False),
    '+weak+tsmr': VariantFlags(True, True, True, False, False, True),
    '+weak+pseudo+tsmr': VariantFlags(True, True, True, True, True, True),
}


def variant_flags(variant: str) -> VariantFlags:
    if variant not in VARIANT_FLAGS:
        raise UsageError(f"Unknown variant '{variant}'; choose from {list(VARIANT_FLAGS)}")
    return VARIANT_FLAGS[variant]


@dataclass(frozen=True)
class ExperimentPlan:
    """One variant trained once per seed on a fixed label fraction"""
    variant: str
    seeds: Tuple[int, ...]
    label_fraction: float = 1.0
    name: Optional[str] = None

    def __post_init__(self):
        variant_flags(self.variant)
        object.__setattr__(self, 'seeds', tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise UsageError("an experiment plan needs at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise UsageError(f"duplicate seeds in {self.seeds}")
        if not 0.0 <= self.label_fraction <= 1.0:
            raise UsageError(f"video-label fraction must lie in [0,1], got {self.label_fraction}")

    @property
    def flags(self) -> VariantFlags:
        return VARIANT_FLAGS[self.variant]

    @property
    def repeats(self) -> int:
        return len(self.seeds)

    @property
    def run_name(self) -> str:
        if self.name:
            return self.name
        safe = self.variant.replace('+', '_plus_').strip('_').replace('__', '_')
        return safe if self.label_fraction == 1.0 else f"{safe}_f{self.label_fraction:g}"


def configure_variant(config: Config, flags: VariantFlags) -> Config:
    """Config with the variant's switches applied; everything else is left as given"""
    data = config.to_dict()
    data['training']['hierarchical_ema'] = flags.hierarchical_ema
    if not flags.mutual_learning:
        data['training']['epochs_mutual'] = 0
    if not flags.video_labels:
        data['weights']['lambda_v_weak'] = 0.0
    data['pseudo']['use_weak_filtering'] = flags.weak_filtering
    data['pseudo']['use_soft_weights'] = flags.soft_weights
    if flags.soft_weights:
        # soft weights replace the hard cut, so candidates start at beta_l
        data['pseudo']['beta'] = data['pseudo']['beta_l']
    data['tsmr']['adaptive'] = flags.adaptive_tsmr
    return Config.from_dict(data)


def summarize(values: Sequence[float]) -> Dict:
    """Mean, sample std (ddof=1) and 95% CI half-width over seeds"""
    arr = np.asarray(values, dtype=np.float64)
    n = int(arr.size)
    if n == 0:
        return {'n': 0, 'mean': float('nan'), 'std': float('nan'), 'ci95': float('nan'), 'values': []}
    std = float(arr.std(ddof=1)) if n > 1 else 0.0
    return {
        'n': n,
        'mean': float(arr.mean()),
        'std': std,
        'ci95': 1.96 * std / math.sqrt(n) if n > 1 else 0.0,
        'values': [float(v) for v in arr],
    }


def paired_one_sided_pvalue(improved: Sequence[float], baseline: Sequence[float]) -> float:
    """p-value of H1: improved > baseline, paired over seeds"""
    a = np.asarray(improved, dtype=np.float64)
    b = np.asarray(baseline, dtype=np.float64)
    if a.shape != b.shape:
        raise UsageError("paired test needs results for the same seeds")
    if a.size < 2 or np.allclose(a - b, (a - b)[0]):
        return float('nan')
    return float(stats.ttest_rel(a, b, alternative='greater').pvalue)


def fraction_trend(fractions: Sequence[float], means: Sequence[float]) -> float:
    """Spearman rank correlation of mean mAP against video-label fraction"""
    if len(fractions) < 2 or np.ptp(np.asarray(means, dtype=np.float64)) == 0:
        return float('nan')
    return float(stats.spearmanr(fractions, means).correlation)


class ExperimentRunner:
    """Runs plans seed by seed, sharing burn-in results between plans of one invocation"""

    def __init__(self, config: Config, split: DatasetSplit, output_dir: Union[str, Path]):
        self.config = config
        self.split = split
        self.output_dir = Path(output_dir)
        self.detector = GridDetector(config.detector)
        self._burn_in_cache: Dict[Tuple[int, str], Tuple[ModelState, List[Dict], Dict[int, ModelState]]] = {}
        self._plan_cache: Dict[Tuple, Dict] = {}

    @staticmethod
    def _burn_in_key(config: Config) -> str:
        """Fingerprint of every setting the burn-in stage depends on"""
        data = config.to_dict()
        training = {k: v for k, v in data['training'].items()
                    if k not in ('epochs_mutual', 'weak_videos_per_batch', 'dump_pseudo_labels', 'reduced_aug')}
        relevant = {
            'detector': data['detector'],
            'weights': {k: data['weights'][k] for k in ('lambda_coord', 'lambda_conf')},
            'tsmr': {k: data['tsmr'][k] for k in ('alpha_i', 'alpha_e_fixed')},
            'training': training,
            'evaluation': data['evaluation'],
        }
        return hashlib.sha256(json.dumps(relevant, sort_keys=True).encode()).hexdigest()

    def train_seed(self, config: Config, split: DatasetSplit, seed: int,
                   run_dir: Optional[Path] = None) -> Dict:
        """Burn-in (cached) then mutual learning; returns final validation and test mAP of theta_T"""
        config = Config.from_dict(merge_overrides(config.to_dict(), {'training': {'seed': seed}}))
        key = (seed, self._burn_in_key(config))

        if key in self._burn_in_cache:
            state, rows, states = self._burn_in_cache[key]
            trainer = Trainer(config, self.detector, run_dir)
            trainer.adopt_history(rows, states)
            logger.info(f"Seed {seed}: reusing cached burn-in ({len(rows)} epochs)")
        else:
            trainer = Trainer(config, self.detector, run_dir)
            state = trainer.run_burn_in(split)
            self._burn_in_cache[key] = (state, list(trainer.recorder.rows), dict(trainer.recorder.states))

        if config.training.epochs_mutual > 0:
            state = trainer.run_mutual_learning(split, state)

        # theta_T: the epoch-level EMA is the reported model in both stages
        final = state.theta_epoch
        result = {
            'seed': seed,
            'val_map': trainer.evaluate(final, split.validation),
            'test_map': trainer.evaluate(final, split.test),
            'epochs': trainer.epochs_completed,
        }
        if run_dir is not None:
            final.save(run_dir / 'checkpoints' / 'final.theta_T')
            save_results(result, run_dir / 'result.json')
        logger.info(f"Seed {seed}: val mAP={result['val_map']:.4f} test mAP={result['test_map']:.4f}")
        return result

    def run_plan(self, plan: ExperimentPlan, base: Optional[Config] = None) -> Dict:
        """Train every seed of the plan and write summary.json"""
        config = configure_variant(base or self.config, plan.flags)
        cache_key = (plan.run_name, plan.seeds, plan.label_fraction,
                     json.dumps(config.to_dict(), sort_keys=True))
        if cache_key in self._plan_cache:
            return self._plan_cache[cache_key]
        split = self.split
        if plan.label_fraction < 1.0:
            split = split.with_label_fraction(plan.label_fraction, config.generator.seed)
        plan_dir = self.output_dir / plan.run_name
        logger.info(f"Running plan {plan.run_name}: variant {plan.variant}, "
                    f"seeds {list(plan.seeds)}, label fraction {plan.label_fraction}")

        per_seed = [self.train_seed(config, split, seed, plan_dir / f"seed_{seed}") for seed in plan.seeds]
        summary = {
            'variant': plan.variant,
            'label_fraction': plan.label_fraction,
            'seeds': list(plan.seeds),
            'runs': per_seed,
            'val_map': summarize([r['val_map'] for r in per_seed]),
            'test_map': summarize([r['test_map'] for r in per_seed]),
        }
        save_results(summary, plan_dir / 'summary.json')
        self._plan_cache[cache_key] = summary
        logger.info(f"{plan.run_name}: test mAP {summary['test_map']['mean']:.4f} "
                    f"+- {summary['test_map']['std']:.4f}")
        return summary

    def _grid_row(self, group: str, setting: str, plan: ExperimentPlan, overrides: Dict) -> Dict:
        base = Config.from_dict(merge_overrides(self.config.to_dict(), overrides))
        summary = self.run_plan(plan, base)
        return {
            'group': group,
            'setting': setting,
            'variant': plan.variant,
            'label_fraction': plan.label_fraction,
            'n_seeds': summary['test_map']['n'],
            'val_mean': summary['val_map']['mean'],
            'val_std': summary['val_map']['std'],
            'test_mean': summary['test_map']['mean'],
            'test_std': summary['test_map']['std'],
            'test_values': summary['test_map']['values'],
        }

    def run_ablation(self, seeds: Sequence[int], table: bool = False) -> pd.DataFrame:
        """Fixed-threshold grid, fixed-rate grid, adaptive rate and the video-label fraction sweep"""
        exp = self.config.experiment
        seeds = tuple(seeds)
        rows = []

        for beta in exp.beta_grid:
            beta_l = min(self.config.pseudo.beta_l, beta)
            plan = ExperimentPlan('+weak+tsmr', seeds, name=f"beta_{beta:g}")
            rows.append(self._grid_row('threshold', f"beta={beta:g}", plan,
                                       {'pseudo': {'beta': beta, 'beta_l': beta_l}}))

        for alpha_e in exp.alpha_e_grid:
            plan = ExperimentPlan('+weak+pseudo', seeds, name=f"alpha_e_{alpha_e:g}")
            rows.append(self._grid_row('ema_rate', f"alpha_e={alpha_e:g}", plan,
                                       {'tsmr': {'alpha_e_fixed': alpha_e, 'adaptive': False}}))

        rows.append(self._grid_row('ema_rate', 'adaptive', ExperimentPlan('+weak+pseudo+tsmr', seeds), {}))

        for fraction in exp.fraction_grid:
            plan = ExperimentPlan('+weak', seeds, label_fraction=fraction, name=f"fraction_{fraction:g}")
            rows.append(self._grid_row('fraction', f"f={fraction:g}", plan, {}))

        if table:
            previous = None
            for variant in VARIANT_FLAGS:
                row = self._grid_row('table', variant, ExperimentPlan(variant, seeds), {})
                row['p_vs_previous'] = (paired_one_sided_pvalue(row['test_values'], previous['test_values'])
                                        if previous is not None else float('nan'))
                rows.append(row)
                previous = row

        frame = pd.DataFrame(rows)
        self.write_report(frame)
        return frame

    def write_report(self, frame: pd.DataFrame):
        """ablation.csv plus a markdown table with the fraction trend"""
        self.output_dir.mkdir(parents=True, exist_ok=True)
        frame.drop(columns=['test_values']).to_csv(self.output_dir / 'ablation.csv', index=False)

        fractions = frame[frame['group'] == 'fraction']
        rho = fraction_trend(fractions['label_fraction'].tolist(), fractions['test_mean'].tolist())
        lines = ['| group | setting | variant | seeds | val mAP | test mAP | p (vs previous) |',
                 '|---|---|---|---|---|---|---|']
        for _, row in frame.iterrows():
            p = row.get('p_vs_previous', float('nan'))
            p_text = '' if p is None or (isinstance(p, float) and math.isnan(p)) else f"{p:.3g}"
            lines.append(f"| {row['group']} | {row['setting']} | {row['variant']} | {row['n_seeds']} | "
                         f"{row['val_mean']:.4f} ± {row['val_std']:.4f} | "
                         f"{row['test_mean']:.4f} ± {row['test_std']:.4f} | {p_text} |")

        report = f"""# Ablation results

Mean ± standard deviation of final teacher mAP over seeds.

{chr(10).join(lines)}

Fraction sweep: Spearman rho of mean test mAP against video-label fraction = {rho:.3f}
"""
        with open(self.output_dir / 'ablation.md', 'w') as f:
            f.write(report)
        logger.info(f"Ablation report written to {self.output_dir}")
